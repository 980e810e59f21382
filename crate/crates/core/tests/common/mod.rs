//! Harness shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg::gradcheck::{check, check_coords, relative_error, GradCheck, STEP};
use volseg::grid::{Grid, LabelVolume};
use volseg::loss::{class_weights, combined_loss_one_hot, soft_dice_loss, weighted_cross_entropy_one_hot, ClassWeights};
use volseg::nn::{
    batchnorm3d, conv3d, maxpool3d, one_hot, relu, softmax_channels, upsample_nearest3d, BatchNormState, Mode,
};
use volseg::unet::{parameter_level, GuidancePyramid, Network, NetworkKind, UNetConfig};
use volseg::{no_grad, Result, Tensor};

pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;
/// Denominator floor for whole-network checks. Losses are O(1), so central
/// differences carry ~1e-10 of rounding noise; biases feeding a batchnorm
/// have an exact zero gradient that would otherwise be compared against it.
pub const NETWORK_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Values with magnitude in [0.1, 1] and random sign, clear of kinks at 0.
pub fn off_zero(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn labels(r: &mut ChaCha8Rng, dims: [usize; 3], classes: u8) -> LabelVolume {
    let n = dims.iter().product();
    Grid::new(dims.to_vec(), (0..n).map(|_| r.random_range(0..classes)).collect()).unwrap()
}

pub fn random_weights(r: &mut ChaCha8Rng, classes: usize) -> ClassWeights {
    class_weights(&(0..classes).map(|_| r.random_range(1..500u64)).collect::<Vec<_>>()).unwrap()
}

fn small_shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = r.random_range(1..=4);
    (0..rank).map(|_| r.random_range(1..=4)).collect()
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Scalar `Σ y ⊙ r` for a fixed random `r`, so every output element gets its own weight.
pub fn contract(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let r = Tensor::from_vec(y.shape().to_vec(), uniform(&mut rng(seed), y.numel(), -1.0, 1.0))?;
    Ok(y.mul(&r)?.sum())
}

type Case = Box<dyn Fn(&mut ChaCha8Rng, u64) -> Result<GradCheck>>;

fn op_cases() -> Vec<(&'static str, Case)> {
    fn unary(
        name: &'static str,
        gen: fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
        f: fn(&Tensor<f64>) -> Tensor<f64>,
    ) -> (&'static str, Case) {
        (
            name,
            Box::new(move |r, seed| {
                let s = small_shape(r);
                let x = gen(r, numel(&s));
                check(&[(s, x)], |t| contract(&f(&t[0]), seed))
            }),
        )
    }
    fn binary(name: &'static str, f: fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>) -> (&'static str, Case) {
        (
            name,
            Box::new(move |r, seed| {
                let s = small_shape(r);
                let a = uniform(r, numel(&s), -1.0, 1.0);
                // denominators kept away from zero
                let b: Vec<f64> = off_zero(r, numel(&s)).iter().map(|v| v * 2.0).collect();
                check(&[(s.clone(), a), (s, b)], |t| contract(&f(&t[0], &t[1])?, seed))
            }),
        )
    }
    let signed = |r: &mut ChaCha8Rng, n| uniform(r, n, -2.0, 2.0);
    vec![
        binary("add", Tensor::add),
        binary("sub", Tensor::sub),
        binary("mul", Tensor::mul),
        binary("div", Tensor::div),
        unary("neg", signed, Tensor::neg),
        unary("add_scalar", signed, |t| t.add_scalar(0.75)),
        unary("mul_scalar", signed, |t| t.mul_scalar(-1.5)),
        unary("exp", signed, Tensor::exp),
        unary("log", |r, n| uniform(r, n, 0.2, 3.0), Tensor::log),
        unary("clamp_min", off_zero, |t| t.clamp_min(0.0)),
        unary("relu", off_zero, relu),
        (
            "sum",
            Box::new(|r, _| {
                let s = small_shape(r);
                let x = uniform(r, numel(&s), -1.0, 1.0);
                check(&[(s, x)], |t| Ok(t[0].sum()))
            }),
        ),
        (
            "mean",
            Box::new(|r, _| {
                let s = small_shape(r);
                let x = uniform(r, numel(&s), -1.0, 1.0);
                check(&[(s, x)], |t| Ok(t[0].mean()))
            }),
        ),
        (
            "max",
            Box::new(|r, _| {
                let s = small_shape(r);
                let x = uniform(r, numel(&s), -1.0, 1.0);
                check(&[(s, x)], |t| Ok(t[0].max().mul_scalar(3.0)))
            }),
        ),
        (
            "reshape",
            Box::new(|r, seed| {
                let s = small_shape(r);
                let n = numel(&s);
                let x = uniform(r, n, -1.0, 1.0);
                check(&[(s, x)], |t| contract(&t[0].reshape(vec![1, n])?, seed))
            }),
        ),
        (
            "slice",
            Box::new(|r, seed| {
                let s: Vec<usize> = (0..3).map(|_| r.random_range(2..=5)).collect();
                let ranges: Vec<_> = s
                    .iter()
                    .map(|&e| {
                        let a = r.random_range(0..e);
                        a..r.random_range(a + 1..=e)
                    })
                    .collect();
                let x = uniform(r, numel(&s), -1.0, 1.0);
                check(&[(s, x)], |t| contract(&t[0].slice(&ranges)?, seed))
            }),
        ),
        (
            "pad_zeros",
            Box::new(|r, seed| {
                let s = small_shape(r);
                let pads: Vec<_> = s.iter().map(|_| (r.random_range(0..3), r.random_range(0..3))).collect();
                let x = uniform(r, numel(&s), -1.0, 1.0);
                check(&[(s, x)], |t| contract(&t[0].pad_zeros(&pads)?, seed))
            }),
        ),
        (
            "concat",
            Box::new(|r, seed| {
                let base = small_shape(r);
                let axis = r.random_range(0..base.len());
                let parts: Vec<(Vec<usize>, Vec<f64>)> = (0..r.random_range(2..=3))
                    .map(|_| {
                        let mut s = base.clone();
                        s[axis] = r.random_range(1..=3);
                        let x = uniform(r, numel(&s), -1.0, 1.0);
                        (s, x)
                    })
                    .collect();
                check(&parts, |t| contract(&Tensor::concat(t, axis)?, seed))
            }),
        ),
        (
            "sum_except",
            Box::new(|r, seed| {
                let s = small_shape(r);
                let axis = r.random_range(0..s.len());
                let x = uniform(r, numel(&s), -1.0, 1.0);
                check(&[(s, x)], |t| contract(&t[0].sum_except(axis)?, seed))
            }),
        ),
        (
            "scale_along",
            Box::new(|r, seed| {
                let s = small_shape(r);
                let axis = r.random_range(0..s.len());
                let x = uniform(r, numel(&s), -1.0, 1.0);
                let c = uniform(r, s[axis], -1.0, 1.0);
                check(&[(s.clone(), x), (vec![s[axis]], c)], |t| contract(&t[0].scale_along(axis, &t[1])?, seed))
            }),
        ),
        (
            "softmax_channels",
            Box::new(|r, seed| {
                let s = vec![r.random_range(1..=2), r.random_range(2..=4), 2, r.random_range(1..=3), 2];
                let x = uniform(r, numel(&s), -2.0, 2.0);
                check(&[(s, x)], |t| contract(&softmax_channels(&t[0])?, seed))
            }),
        ),
        (
            "conv3d",
            Box::new(|r, seed| {
                let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
                let s = vec![n, cin, r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4)];
                let x = uniform(r, numel(&s), -1.0, 1.0);
                let w = uniform(r, cout * cin * 27, -0.5, 0.5);
                let b = uniform(r, cout, -0.5, 0.5);
                check(&[(s, x), (vec![cout, cin, 3, 3, 3], w), (vec![cout], b)], |t| {
                    contract(&conv3d(&t[0], &t[1], &t[2])?, seed)
                })
            }),
        ),
        (
            "batchnorm3d_train",
            Box::new(|r, seed| {
                let c = r.random_range(1..=3);
                let s = vec![2, c, 2, r.random_range(1..=3), 2];
                let x = uniform(r, numel(&s), -1.0, 1.0);
                let (g, b) = (uniform(r, c, 0.5, 1.5), uniform(r, c, -0.5, 0.5));
                check(&[(s, x), (vec![c], g), (vec![c], b)], |t| {
                    let state = BatchNormState::new("bn", c);
                    contract(&batchnorm3d(&t[0], &t[1], &t[2], &state, Mode::Train)?, seed)
                })
            }),
        ),
        (
            "batchnorm3d_eval",
            Box::new(|r, seed| {
                let c = r.random_range(1..=3);
                let s = vec![1, c, 2, 2, r.random_range(1..=3)];
                let x = uniform(r, numel(&s), -1.0, 1.0);
                let (g, b) = (uniform(r, c, 0.5, 1.5), uniform(r, c, -0.5, 0.5));
                let (m, v) = (uniform(r, c, -0.5, 0.5), uniform(r, c, 0.5, 2.0));
                check(&[(s, x), (vec![c], g), (vec![c], b)], |t| {
                    let state = BatchNormState::new("bn", c);
                    state.set_running(m.clone(), v.clone())?;
                    contract(&batchnorm3d(&t[0], &t[1], &t[2], &state, Mode::Eval)?, seed)
                })
            }),
        ),
        (
            "maxpool3d",
            Box::new(|r, seed| {
                let s = vec![r.random_range(1..=2), r.random_range(1..=2), 2, 4, 2 * r.random_range(1..=2)];
                let x = uniform(r, numel(&s), -1.0, 1.0);
                check(&[(s, x)], |t| contract(&maxpool3d(&t[0])?, seed))
            }),
        ),
        (
            "upsample_nearest3d",
            Box::new(|r, seed| {
                let s = vec![1, r.random_range(1..=2), r.random_range(1..=2), 2, r.random_range(1..=3)];
                let x = uniform(r, numel(&s), -1.0, 1.0);
                check(&[(s, x)], |t| contract(&upsample_nearest3d(&t[0])?, seed))
            }),
        ),
        (
            "soft_dice_loss",
            Box::new(|r, _| {
                let (k, dims) = (r.random_range(2..=4), [2, r.random_range(1..=3), 2]);
                let target = one_hot::<f64>(&[&labels(r, dims, k as u8)], k)?;
                let p = uniform(r, target.numel(), 0.05, 0.95);
                check(&[(target.shape().to_vec(), p)], |t| soft_dice_loss(&t[0], &target, 1e-5))
            }),
        ),
        (
            "weighted_cross_entropy",
            Box::new(|r, _| {
                let (k, dims) = (r.random_range(2..=4), [2, r.random_range(1..=3), 2]);
                let target = one_hot::<f64>(&[&labels(r, dims, k as u8)], k)?;
                let w = random_weights(r, k);
                let p = uniform(r, target.numel(), 0.05, 0.95);
                check(&[(target.shape().to_vec(), p)], |t| weighted_cross_entropy_one_hot(&t[0], &target, &w))
            }),
        ),
        (
            "combined_loss",
            Box::new(|r, _| {
                let (k, dims) = (r.random_range(2..=4), [2, r.random_range(1..=3), 2]);
                let target = one_hot::<f64>(&[&labels(r, dims, k as u8)], k)?;
                let w = random_weights(r, k);
                let x = uniform(r, target.numel(), -2.0, 2.0);
                check(&[(target.shape().to_vec(), x)], |t| combined_loss_one_hot(&t[0], &target, &w, 1e-5))
            }),
        ),
    ]
}

/// Every differentiable op, `instances` random cases each.
pub fn op_suite(instances: usize) -> Vec<(&'static str, GradCheck)> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut r = rng(1000 + i as u64);
            let mut total = GradCheck::default();
            for inst in 0..instances {
                let g = case(&mut r, (i * 1000 + inst) as u64).unwrap_or_else(|e| panic!("{name}: {e}"));
                total.merge(&g);
            }
            (name, total)
        })
        .collect()
}

pub fn tiny_config(kind: NetworkKind) -> UNetConfig {
    UNetConfig {
        encoder_channels: vec![2, 3, 4],
        decoder_channels: vec![2, 3],
        in_channels: 1,
        num_classes: 3,
        aux_head_levels: Vec::new(),
        postconcat: false,
    }
    .for_kind(kind)
}

/// Central differences over sampled parameter coordinates of a network loss.
/// Parameters are perturbed in place and restored. Level-1 coordinates are
/// differenced through `level1_loss`, the part of the objective whose
/// gradient reaches level 1.
fn check_params(
    net: &mut Network<f64>,
    loss: &dyn Fn(&Network<f64>) -> Result<Tensor<f64>>,
    level1_loss: &dyn Fn(&Network<f64>) -> Result<Tensor<f64>>,
    coords: &[(usize, usize)],
) -> Result<GradCheck> {
    net.zero_grads();
    loss(net)?.backward()?;
    let analytic: Vec<Option<Vec<f64>>> = net.params().iter().map(|p| p.grad()).collect();
    let mut report = GradCheck::default();
    for &(slot, j) in coords {
        let original = net.params().get(slot).value().to_vec();
        let f = if parameter_level(net.params().get(slot).name()) == Some(1) { level1_loss } else { loss };
        let mut eval = |delta: f64| -> Result<f64> {
            let mut d = original.clone();
            d[j] += delta;
            net.params_mut().get_mut(slot).set_data(d)?;
            no_grad(|| f(net)).map(|t| t.item())
        };
        let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
        net.params_mut().get_mut(slot).set_data(original)?;
        let a = analytic[slot].as_ref().map_or(0.0, |g| g[j]);
        report.max_relative_error = report.max_relative_error.max(relative_error(a, numeric, NETWORK_FLOOR));
        report.checked += 1;
    }
    Ok(report)
}

fn sample_param_coords(net: &Network<f64>, r: &mut ChaCha8Rng, count: usize) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = net.params().iter().map(|p| p.value().numel()).collect();
    let total: usize = sizes.iter().sum();
    (0..count)
        .map(|_| {
            let mut flat = r.random_range(0..total);
            let mut slot = 0;
            while flat >= sizes[slot] {
                flat -= sizes[slot];
                slot += 1;
            }
            (slot, flat)
        })
        .collect()
}

fn sample_input_coords(n: usize, r: &mut ChaCha8Rng, count: usize) -> Vec<(usize, usize)> {
    (0..count).map(|_| (0, r.random_range(0..n))).collect()
}

/// Training-mode loss of one tiny network instance, as a function of an input tensor.
struct NetCase {
    net: Network<f64>,
    x: Vec<f64>,
    expanded: Vec<f64>,
    target: Tensor<f64>,
    exp_target: Tensor<f64>,
    guidance: Option<GuidancePyramid<f64>>,
    weights: ClassWeights,
}

const P: usize = 8;
const E: usize = 12;

impl NetCase {
    fn new(kind: NetworkKind, seed: u64) -> Result<Self> {
        let mut r = rng(seed);
        let net = Network::<f64>::build(tiny_config(kind), seed)?;
        let k = net.config().num_classes;
        let x = uniform(&mut r, P * P * P, -1.0, 1.0);
        let expanded = uniform(&mut r, E * E * E, -1.0, 1.0);
        let target = one_hot(&[&labels(&mut r, [P; 3], k as u8)], k)?;
        let exp_target = one_hot(&[&labels(&mut r, [E / 2; 3], k as u8)], k)?;
        let guidance = if kind == NetworkKind::PostConcat {
            Some(GuidancePyramid::from_labels(&[&labels(&mut r, [P; 3], k as u8)], k, net.config().levels() - 1)?)
        } else {
            None
        };
        let weights = random_weights(&mut r, k);
        Ok(NetCase { net, x, expanded, target, exp_target, guidance, weights })
    }

    /// Standard-patch term only.
    fn standard_loss(&self, net: &Network<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        match net.config().kind() {
            NetworkKind::MeUnet => {
                let out = net.forward_meunet_dual(x, &self.e(), Mode::Train)?;
                combined_loss_one_hot(&out.standard, &self.target, &self.weights, 1e-5)
            }
            _ => self.loss(net, x, &self.e()),
        }
    }

    fn loss(&self, net: &Network<f64>, x: &Tensor<f64>, e: &Tensor<f64>) -> Result<Tensor<f64>> {
        match net.config().kind() {
            NetworkKind::Standard => combined_loss_one_hot(&net.forward_standard(x, Mode::Train)?, &self.target, &self.weights, 1e-5),
            NetworkKind::PostConcat => {
                let g = self.guidance.as_ref().expect("guidance");
                combined_loss_one_hot(&net.forward_postconcat(x, g, Mode::Train)?, &self.target, &self.weights, 1e-5)
            }
            NetworkKind::MeUnet => {
                let out = net.forward_meunet_dual(x, e, Mode::Train)?;
                combined_loss_one_hot(&out.standard, &self.target, &self.weights, 1e-5)?
                    .add(&combined_loss_one_hot(&out.expanded, &self.exp_target, &self.weights, 1e-5)?)
            }
        }
    }

    fn x(&self) -> Tensor<f64> {
        Tensor::from_vec(vec![1, 1, P, P, P], self.x.clone()).unwrap()
    }

    fn e(&self) -> Tensor<f64> {
        Tensor::from_vec(vec![1, 1, E, E, E], self.expanded.clone()).unwrap()
    }
}

/// Gradient checks of whole networks: sampled parameter coordinates plus
/// input coordinates, `instances` random builds per variant.
pub fn network_suite(instances: usize) -> Vec<(&'static str, GradCheck)> {
    let variants = [
        ("network_standard", NetworkKind::Standard),
        ("network_meunet", NetworkKind::MeUnet),
        ("network_postconcat", NetworkKind::PostConcat),
    ];
    variants
        .iter()
        .enumerate()
        .map(|(v, &(name, kind))| {
            let mut total = GradCheck::default();
            for inst in 0..instances {
                let seed = (v * 100 + inst) as u64;
                let mut case = NetCase::new(kind, seed).unwrap();
                let mut r = rng(seed + 7);
                let coords = sample_param_coords(&case.net, &mut r, 16);
                let (x, e) = (case.x(), case.e());
                let mut net = std::mem::replace(&mut case.net, Network::build(tiny_config(kind), 0).unwrap());
                let g = check_params(&mut net, &|n| case.loss(n, &x, &e), &|n| case.standard_loss(n, &x), &coords).unwrap();
                total.merge(&g);
                // the input of the expanded pass only feeds the gated level 1,
                // so only the standard input is differenced
                let xc = sample_input_coords(P * P * P, &mut r, 6);
                let g = check_coords(&[(vec![1, 1, P, P, P], case.x.clone())], Some(&xc), |t| case.loss(&net, &t[0], &e)).unwrap();
                total.merge(&g);
            }
            (name, total)
        })
        .collect()
}

/// Outcome of the gating checks on one random meU-net instance.
pub struct Gating {
    /// Level-1 gradients under the expanded loss alone are all exactly zero.
    pub expanded_zero: bool,
    /// Level-1 gradients under the sum equal those of the standard loss alone, bitwise.
    pub combined_equal: bool,
}

pub fn gating_instance(seed: u64) -> Result<Gating> {
    let case = NetCase::new(NetworkKind::MeUnet, seed)?;
    let net = &case.net;
    let (x, e) = (case.x(), case.e());
    let level1 = |net: &Network<f64>| -> Vec<(String, Option<Vec<f64>>)> {
        net.level_one_params().map(|p| (p.name().to_string(), p.grad())).collect()
    };
    let dual = |net: &Network<f64>| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let out = net.forward_meunet_dual(&x, &e, Mode::Train)?;
        Ok((
            combined_loss_one_hot(&out.standard, &case.target, &case.weights, 1e-5)?,
            combined_loss_one_hot(&out.expanded, &case.exp_target, &case.weights, 1e-5)?,
        ))
    };

    net.zero_grads();
    dual(net)?.1.backward()?;
    let expanded_zero = level1(net)
        .iter()
        .all(|(_, g)| g.as_ref().is_none_or(|g| g.iter().all(|&v| v.to_bits() == 0)));

    net.zero_grads();
    let (ls, le) = dual(net)?;
    ls.add(&le)?.backward()?;
    let both = level1(net);
    net.zero_grads();
    dual(net)?.0.backward()?;
    let alone = level1(net);
    let bits = |g: &Option<Vec<f64>>| g.as_ref().map(|g| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let combined_equal = both.len() == alone.len()
        && !both.is_empty()
        && both.iter().zip(&alone).all(|(a, b)| a.0 == b.0 && bits(&a.1) == bits(&b.1) && a.1.is_some());
    Ok(Gating { expanded_zero, combined_equal })
}

// Scalar-loop references for the losses, written against the formulas
// rather than the tensor ops.

pub fn ref_class_weights(counts: &[u64]) -> Vec<f64> {
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let mut e = Vec::new();
    let mut z = 0.0;
    for &c in counts {
        let v = (total / c as f64).exp();
        e.push(v);
        z += v;
    }
    e.iter().map(|v| v / z).collect()
}

/// `probs` and `target` laid out `[N][K][V]`.
pub fn ref_dice(probs: &[f64], target: &[f64], n: usize, k: usize, v: usize, eps: f64) -> f64 {
    let mut loss = 0.0;
    for c in 0..k {
        let (mut inter, mut sl, mut sp) = (0.0, 0.0, 0.0);
        for item in 0..n {
            for i in 0..v {
                let idx = (item * k + c) * v + i;
                inter += probs[idx] * target[idx];
                sl += target[idx];
                sp += probs[idx];
            }
        }
        loss += 1.0 - 2.0 * inter / (sl + sp + eps);
    }
    loss / k as f64
}

pub fn ref_weighted_ce(probs: &[f64], target: &[f64], n: usize, k: usize, v: usize, w: &[f64]) -> f64 {
    let mut total = 0.0;
    for item in 0..n {
        for i in 0..v {
            for c in 0..k {
                let idx = (item * k + c) * v + i;
                if target[idx] == 1.0 {
                    total += w[c] * -probs[idx].max(1e-12).ln();
                }
            }
        }
    }
    total / (n * v) as f64
}

pub fn ref_softmax(logits: &[f64], n: usize, k: usize, v: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for item in 0..n {
        for i in 0..v {
            let at = |c: usize| (item * k + c) * v + i;
            let m = (0..k).map(|c| logits[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (logits[at(c)] - m).exp()).sum();
            for c in 0..k {
                out[at(c)] = (logits[at(c)] - m).exp() / z;
            }
        }
    }
    out
}

/// Largest deviation between the loss functions and the loop references over
/// `cases` random problems.
pub fn loss_oracle_deviation(cases: usize) -> f64 {
    let mut r = rng(404);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, k) = (r.random_range(1..=2), r.random_range(2..=4));
        let dims = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
        let v: usize = dims.iter().product();
        let labs: Vec<LabelVolume> = (0..n).map(|_| labels(&mut r, dims, k as u8)).collect();
        let refs: Vec<&LabelVolume> = labs.iter().collect();
        let target = one_hot::<f64>(&refs, k).unwrap();
        let counts: Vec<u64> = (0..k).map(|_| r.random_range(1..1000)).collect();
        let w = class_weights(&counts).unwrap();
        let rw = ref_class_weights(&counts);
        worst = worst.max(w.weights.iter().zip(&rw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let logits = uniform(&mut r, n * k * v, -3.0, 3.0);
        let probs = ref_softmax(&logits, n, k, v);
        let pt = Tensor::from_vec(target.shape().to_vec(), probs.clone()).unwrap();
        let dice = soft_dice_loss(&pt, &target, 1e-5).unwrap().item();
        worst = worst.max((dice - ref_dice(&probs, target.data(), n, k, v, 1e-5)).abs());
        let ce = weighted_cross_entropy_one_hot(&pt, &target, &w).unwrap().item();
        worst = worst.max((ce - ref_weighted_ce(&probs, target.data(), n, k, v, &rw)).abs());
        let lt = Tensor::from_vec(target.shape().to_vec(), logits).unwrap();
        let comb = combined_loss_one_hot(&lt, &target, &w, 1e-5).unwrap().item();
        let want = ref_dice(&probs, target.data(), n, k, v, 1e-5) + ref_weighted_ce(&probs, target.data(), n, k, v, &rw);
        worst = worst.max((comb - want).abs());
    }
    worst
}

/// The three hand-evaluated loss examples, each `(got, expected)`.
pub fn loss_hand_examples() -> Vec<(&'static str, f64, f64)> {
    let w = class_weights(&[900, 100]).unwrap();
    let dice = soft_dice_loss(
        &Tensor::<f64>::from_vec(vec![1, 1, 4], vec![0.9, 0.1, 0.6, 0.2]).unwrap(),
        &Tensor::from_vec(vec![1, 1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
        1e-5,
    )
    .unwrap()
    .item();
    // binary perfect prediction, one class of volume 8
    let t = Tensor::<f64>::from_vec(vec![1, 1, 8], vec![1.0; 8]).unwrap();
    let perfect = soft_dice_loss(&t, &t, 1e-5).unwrap().item();
    vec![
        ("class_weights[0]", w.weights[0], 1.380e-4),
        ("class_weights[1]", w.weights[1], 0.999862),
        ("soft_dice", dice, 1.0 - 3.0 / 3.80001),
        ("soft_dice_perfect", perfect, 1e-5 / (16.0 + 1e-5)),
    ]
}

/// Stage-1 style guidance map holding the reference labels.
pub fn oracle_guidance(id: &str, labels: &LabelVolume) -> BTreeMap<String, LabelVolume> {
    BTreeMap::from([(id.to_string(), labels.clone())])
}

/// Fused probabilities compared with a brute-force per-voxel accumulation.
pub struct FusionOutcome {
    pub exact: bool,
    pub max_sum_deviation: f64,
    pub tiles: usize,
}

/// Tile origins along one axis, written independently of the sampler.
fn oracle_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    while out.last().unwrap() + patch < extent {
        out.push(out.last().unwrap() + stride);
    }
    out
}

pub fn fusion_oracle(edge: usize, patch: usize, stride: usize, seed: u64) -> FusionOutcome {
    use volseg::infer::fuse_predict;
    use volseg::sampler::stack_images;

    let mut r = rng(seed);
    let image = Grid::new(vec![edge; 3], uniform(&mut r, edge * edge * edge, -1.0, 1.0).iter().map(|&v| v as f32).collect()).unwrap();
    let net = Network::<f32>::build(UNetConfig::desk(3), seed).unwrap();
    net.init_running_stats();
    let logits_at = |crop: &Grid<f32>| net.forward_standard(&stack_images::<f32>(&[crop]).unwrap(), Mode::Eval).unwrap();
    let fused = fuse_predict(&image, patch, stride, |_, crop| Ok(logits_at(crop))).unwrap();

    let pos = oracle_positions(edge, patch, stride);
    let mut tiles = Vec::new();
    for &z in &pos {
        for &y in &pos {
            for &x in &pos {
                // crop with zero fill, coded directly
                let mut crop = vec![0.0f32; patch * patch * patch];
                for (i, v) in crop.iter_mut().enumerate() {
                    let (a, b, c) = (z + i / (patch * patch), y + (i / patch) % patch, x + i % patch);
                    if a < edge && b < edge && c < edge {
                        *v = image.data()[(a * edge + b) * edge + c];
                    }
                }
                let crop = Grid::new(vec![patch; 3], crop).unwrap();
                tiles.push(([z, y, x], logits_at(&crop).to_f64_vec()));
            }
        }
    }
    let k = 3;
    let ps = patch * patch * patch;
    let (lo, hi) = (patch / 4, patch / 4 + patch / 2);
    let mut exact = true;
    let mut max_sum_deviation: f64 = 0.0;
    for v in 0..edge * edge * edge {
        let g = [v / (edge * edge), (v / edge) % edge, v % edge];
        let mut acc = [0.0f64; 3];
        let mut wsum = 0.0;
        for (o, logits) in &tiles {
            let l = [g[0].wrapping_sub(o[0]), g[1].wrapping_sub(o[1]), g[2].wrapping_sub(o[2])];
            if l.iter().any(|&c| c >= patch) {
                continue;
            }
            let w = if l.iter().all(|c| (lo..hi).contains(c)) { 2.0 } else { 1.0 };
            let pv = (l[0] * patch + l[1]) * patch + l[2];
            let m = (0..k).map(|c| logits[c * ps + pv]).fold(f64::NEG_INFINITY, f64::max);
            let mut p = [0.0f64; 3];
            let mut z = 0.0;
            for c in 0..k {
                p[c] = (logits[c * ps + pv] - m).exp();
                z += p[c];
            }
            for c in 0..k {
                acc[c] += w * (p[c] / z);
            }
            wsum += w;
        }
        let mut sum = 0.0;
        for c in 0..k {
            let want = acc[c] / wsum;
            let got = fused.probs.data()[c * edge * edge * edge + v];
            exact &= got.to_bits() == want.to_bits();
            sum += got;
        }
        max_sum_deviation = max_sum_deviation.max((sum - 1.0).abs());
    }
    FusionOutcome { exact, max_sum_deviation, tiles: tiles.len() }
}

/// Exhaustive crop checks over every origin of an `edge`³ volume.
pub struct GeometryOutcome {
    /// Every voxel is covered by at least one tile, for every stride.
    pub coverage: bool,
    /// The centre crop of every expanded patch equals its standard patch.
    pub centre: bool,
    /// Every crop voxel equals the source voxel, or zero / background outside.
    pub padding: bool,
    pub origins: usize,
}

pub fn sampler_geometry(edge: usize, patch: usize, expanded: usize) -> GeometryOutcome {
    use volseg::sampler::{tile_origins, PatchRecord};

    let n = edge * edge * edge;
    // voxel values encode their index, so any misplaced read is visible
    let image = Grid::new(vec![edge; 3], (0..n).map(|i| (i + 1) as f32).collect()).unwrap();
    let labels = Grid::new(vec![edge; 3], (0..n).map(|i| (i % 250 + 1) as u8).collect()).unwrap();

    let mut coverage = true;
    for stride in 1..=patch {
        let mut count = vec![0u32; n];
        for o in tile_origins([edge; 3], patch, stride) {
            coverage &= o.iter().all(|&c| c < edge);
            for z in o[0]..(o[0] + patch).min(edge) {
                for y in o[1]..(o[1] + patch).min(edge) {
                    for x in o[2]..(o[2] + patch).min(edge) {
                        count[(z * edge + y) * edge + x] += 1;
                    }
                }
            }
        }
        coverage &= count.iter().all(|&c| c >= 1);
    }

    let m = ((expanded - patch) / 2) as isize;
    let (mut centre, mut padding, mut origins) = (true, true, 0);
    let source = |p: [isize; 3]| -> (f32, u8) {
        if p.iter().all(|&c| c >= 0 && (c as usize) < edge) {
            let i = (p[0] as usize * edge + p[1] as usize) * edge + p[2] as usize;
            (image.data()[i], labels.data()[i])
        } else {
            (0.0, 0)
        }
    };
    for oz in 0..edge {
        for oy in 0..edge {
            for ox in 0..edge {
                let o = [oz, oy, ox];
                let rec = PatchRecord::extract("v", &image, &labels, o, patch, Some(expanded)).unwrap();
                let (ei, el) = (rec.expanded_image.as_ref().unwrap(), rec.expanded_labels.as_ref().unwrap());
                for (cells, e, shift) in [(patch, (&rec.image, &rec.labels), 0isize), (expanded, (ei, el), -m)] {
                    for i in 0..cells * cells * cells {
                        let l = [i / (cells * cells), (i / cells) % cells, i % cells];
                        let p = [0, 1, 2].map(|a| o[a] as isize + shift + l[a] as isize);
                        padding &= source(p) == (e.0.data()[i], e.1.data()[i]);
                    }
                }
                let mid = m as usize;
                let crop = ei.crop_padded(&[m; 3], &[patch; 3], -1.0);
                let crop_l = el.crop_padded(&[mid as isize; 3], &[patch; 3], 255);
                centre &= crop.data().iter().zip(rec.image.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                centre &= crop_l.data() == rec.labels.data();
                origins += 1;
            }
        }
    }
    GeometryOutcome { coverage, centre, padding, origins }
}

/// A 32³ crop of a 64³ phantom that contains every class, with its volume.
pub fn overfit_patch(expanded: Option<usize>) -> (volseg::sampler::PatchRecord, LabelVolume) {
    use volseg::sampler::{tile_origins, PatchRecord};
    use volseg::volio::{phantom_generate, PhantomSpec};

    let (image, labels) = phantom_generate(&PhantomSpec::new(11, [64; 3])).unwrap();
    for o in tile_origins([64; 3], 32, 16) {
        let rec = PatchRecord::extract("overfit", &image, &labels, o, 32, expanded).unwrap();
        if (0..3).all(|c| rec.labels.count(c) > 0) {
            return (rec, labels);
        }
    }
    panic!("no patch with every class");
}

/// Adam steps on one fixed patch until the loss drops below `target`.
/// Returns the number of steps taken and the last loss.
pub fn overfit(kind: NetworkKind, max_steps: usize, target: f64) -> (usize, f64) {
    use volseg::loss::{count_classes, DICE_EPSILON};
    use volseg::sampler::expanded_edge;
    use volseg::train::{meunet_train_step, standard_train_step, AdamConfig, AdamState};

    let cfg = UNetConfig::desk(3).for_kind(kind);
    let expanded = (kind == NetworkKind::MeUnet).then(|| expanded_edge(32, 1.5, cfg.levels()));
    let (rec, labels) = overfit_patch(expanded);
    let weights = class_weights(&count_classes([&labels], 3).unwrap()).unwrap();
    let guidance = oracle_guidance("overfit", &labels);
    let mut net = Network::<f32>::build(cfg, 3).unwrap();
    let mut adam = AdamState::new(net.params(), AdamConfig::default());
    let mut last = f64::INFINITY;
    for step in 1..=max_steps {
        last = match kind {
            NetworkKind::MeUnet => {
                let (a, b) = meunet_train_step(&mut net, &mut adam, &[&rec], &weights, DICE_EPSILON).unwrap();
                a + b
            }
            _ => standard_train_step(&mut net, &mut adam, &[&rec], Some(&guidance), &weights, DICE_EPSILON).unwrap(),
        };
        if last < target {
            return (step, last);
        }
    }
    (max_steps, last)
}
