mod common;

use common::{oracle_guidance, overfit, overfit_patch};
use volseg::loss::{class_weights, count_classes, DICE_EPSILON};
use volseg::tensor::{Parameter, ParameterSet};
use volseg::train::{standard_train_step, train_network, AdamConfig, AdamState, RunConfig};
use volseg::unet::{Network, NetworkKind, UNetConfig};
use volseg::volio::{read_cases, write_phantom_corpus};

#[test]
fn standard_overfits_one_patch() {
    let (steps, loss) = overfit(NetworkKind::Standard, 200, 0.2);
    assert!(loss < 0.2, "loss {loss} after {steps} steps");
}

#[test]
fn oracle_guidance_overfits_one_patch() {
    let (steps, loss) = overfit(NetworkKind::PostConcat, 200, 0.1);
    assert!(loss < 0.1, "loss {loss} after {steps} steps");
}

#[test]
fn all_background_guidance_still_converges() {
    let (rec, labels) = overfit_patch(None);
    let weights = class_weights(&count_classes([&labels], 3).unwrap()).unwrap();
    let mut empty = oracle_guidance("overfit", &labels);
    empty.values_mut().for_each(|g| g.data_mut().fill(0));
    let mut net = Network::<f32>::build(UNetConfig::desk(3).for_kind(NetworkKind::PostConcat), 3).unwrap();
    let mut adam = AdamState::new(net.params(), AdamConfig::default());
    let mut first = None;
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = standard_train_step(&mut net, &mut adam, &[&rec], Some(&empty), &weights, DICE_EPSILON).unwrap();
        first.get_or_insert(last);
        if last < 0.2 {
            break;
        }
    }
    assert!(last.is_finite() && last < 0.2, "first {first:?}, last {last}");
}

#[test]
fn adam_matches_scalar_reference() {
    let g = [0.3, -1.2, 0.0, 2.5e-3];
    let mut set = ParameterSet::<f64>::new();
    set.push(Parameter::new("w", vec![4], vec![0.5, -0.25, 1.0, 0.0]).unwrap()).unwrap();
    let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
    let mut adam = AdamState::new(&set, cfg);
    let (mut w, mut m, mut v) = ([0.5, -0.25, 1.0, 0.0], [0.0; 4], [0.0; 4]);
    for t in 1..=25 {
        let scale = 1.0 + 0.1 * t as f64;
        // loss = sum(g * scale * w) gives gradient g * scale
        set.zero_grads();
        let coeff = volseg::Tensor::<f64>::from_vec(vec![4], g.iter().map(|x| x * scale).collect()).unwrap();
        set.get(0).value().mul(&coeff).unwrap().sum().backward().unwrap();
        adam.step(&mut set).unwrap();
        for j in 0..4 {
            let gj = g[j] * scale;
            m[j] = 0.9 * m[j] + 0.1 * gj;
            v[j] = 0.999 * v[j] + 0.001 * gj * gj;
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.999f64.powi(t));
            w[j] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        for (a, b) in set.get(0).value().data().iter().zip(&w) {
            assert!((a - b).abs() <= 1e-12, "step {t}: {a} vs {b}");
        }
    }
}

fn desk_run(seed: u64, epochs: usize) -> (volseg::train::History, Vec<f64>) {
    let dir = tempfile::tempdir().unwrap();
    let split = write_phantom_corpus(dir.path(), seed, [64; 3], 4).unwrap();
    let train = read_cases(dir.path(), &split.train).unwrap();
    let val = read_cases(dir.path(), &split.val).unwrap();
    let mut cfg = RunConfig::desk(seed, 3);
    cfg.max_epochs = epochs;
    cfg.max_patches_per_epoch = Some(24);
    let out = train_network::<f32>(NetworkKind::Standard, &train, &val, &cfg, None).unwrap();
    let best = out.history.rows[out.best_epoch].val_dice.clone();
    (out.history, best)
}

#[test]
fn desk_run_segments_the_large_tube() {
    let (history, best) = desk_run(8, 8);
    assert!(best[1] >= 0.8, "best val dice {best:?}\n{}", history.to_csv());
}

#[test]
fn identical_seeds_give_identical_history() {
    let (a, _) = desk_run(3, 2);
    let (b, _) = desk_run(3, 2);
    assert_eq!(a.to_csv(), b.to_csv());
}
