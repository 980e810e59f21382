mod common;

use common::tiny_config;
use volseg::grid::LabelVolume;
use volseg::nn::Mode;
use volseg::unet::{load_checkpoint, save_checkpoint, GuidancePyramid, Network, NetworkKind, UNetConfig};
use volseg::volio::{phantom_generate, PhantomSpec};
use volseg::Tensor;

fn ramp(edge: usize) -> Tensor<f32> {
    let n = edge * edge * edge;
    Tensor::from_vec(vec![1, 1, edge, edge, edge], (0..n).map(|i| ((i * 37) % 101) as f32 / 101.0 - 0.5).collect()).unwrap()
}

/// Sum, sum of squares, first and last value.
fn checksums(t: &Tensor<f32>) -> [f64; 4] {
    let v = t.to_f64_vec();
    [v.iter().sum(), v.iter().map(|x| x * x).sum(), v[0], v[v.len() - 1]]
}

#[test]
fn postconcat_encoder_ignores_guidance() {
    let net = Network::<f64>::build(tiny_config(NetworkKind::PostConcat), 9).unwrap();
    let x = Tensor::<f64>::from_vec(vec![1, 1, 8, 8, 8], (0..512).map(|i| (i % 9) as f64 / 9.0).collect()).unwrap();
    let a = LabelVolume::filled(vec![8, 8, 8], 0);
    let b = LabelVolume::new(vec![8, 8, 8], (0..512).map(|i| (i % 3) as u8).collect()).unwrap();
    let ga = GuidancePyramid::from_labels(&[&a], 3, 2).unwrap();
    let gb = GuidancePyramid::from_labels(&[&b], 3, 2).unwrap();
    let (la, fa) = net.forward_postconcat_with_features(&x, &ga, Mode::Train).unwrap();
    let (lb, fb) = net.forward_postconcat_with_features(&x, &gb, Mode::Train).unwrap();
    for (p, q) in fa.iter().zip(&fb) {
        assert_eq!(p.data(), q.data());
    }
    assert_ne!(la.data(), lb.data());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let net = Network::<f32>::build(UNetConfig::desk(3), 21).unwrap();
    net.init_running_stats();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&net, dir.path()).unwrap();
    let (loaded, manifest) = load_checkpoint::<f32>(dir.path()).unwrap();
    assert_eq!(&manifest.config, net.config());
    let x = ramp(16);
    let a = net.forward_standard(&x, Mode::Eval).unwrap();
    let b = loaded.forward_standard(&x, Mode::Eval).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn eval_forward_is_deterministic() {
    let net = Network::<f32>::build(UNetConfig::desk(3).for_kind(NetworkKind::MeUnet), 5).unwrap();
    net.init_running_stats();
    let x = ramp(16);
    let a = net.forward_deep(&x, Mode::Eval).unwrap();
    let b = net.forward_deep(&x, Mode::Eval).unwrap();
    assert_eq!(a.len(), 2);
    for (l, t) in &a {
        assert_eq!(t.data(), b[l].data());
    }
}

#[test]
fn golden_logits() {
    let net = Network::<f32>::build(UNetConfig::desk(3), 1234).unwrap();
    net.init_running_stats();
    let logits = net.forward_standard(&ramp(8), Mode::Eval).unwrap();
    assert_eq!(logits.shape(), &[1, 3, 8, 8, 8]);
    // tolerance rather than bits: the f32 convolution kernel depends on the CPU
    for (got, want) in checksums(&logits).iter().zip(GOLDEN_LOGITS) {
        assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0), "{:?}", checksums(&logits));
    }
}

#[test]
fn golden_phantom() {
    let (image, labels) = phantom_generate(&PhantomSpec::new(42, [64; 3])).unwrap();
    let counts = [0u8, 1, 2].map(|c| labels.count(c));
    assert_eq!(counts, GOLDEN_COUNTS);
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64;
    assert!((mean - GOLDEN_MEAN).abs() < 1e-9, "mean {mean}");
}

const GOLDEN_LOGITS: [f64; 4] = [-138.05993205022241, 70.3937408232855, 0.02165091596543789, -0.09432296454906464];
const GOLDEN_COUNTS: [usize; 3] = [254141, 7303, 700];
const GOLDEN_MEAN: f64 = 0.030188210897001435;
