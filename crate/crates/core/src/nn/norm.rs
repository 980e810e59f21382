//! Batch normalization over `(N, D, H, W)` per channel.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{record_saved, Element, Tensor};

use super::Mode;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

/// Running statistics and hyperparameters of one batchnorm layer. The
/// affine scale/shift live with the other trainable parameters.
#[derive(Debug)]
pub struct BatchNormState {
    pub name: String,
    pub momentum: f64,
    pub epsilon: f64,
    running: Mutex<RunningStats>,
}

impl Clone for BatchNormState {
    fn clone(&self) -> Self {
        BatchNormState {
            name: self.name.clone(),
            momentum: self.momentum,
            epsilon: self.epsilon,
            running: Mutex::new(self.running()),
        }
    }
}

impl BatchNormState {
    /// Running mean 0 / variance 1, not yet usable in eval mode.
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNormState {
            name: name.into(),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            running: Mutex::new(RunningStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
                initialized: false,
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.running().mean.len()
    }

    pub fn running(&self) -> RunningStats {
        self.running.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Sets running statistics explicitly and marks them usable for eval.
    pub fn set_running(&self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let ch = self.channels();
        if mean.len() != ch || var.len() != ch || var.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config(format!(
                "batchnorm {}: running stats need {ch} entries with positive variance",
                self.name
            )));
        }
        *self.running.lock().unwrap_or_else(|e| e.into_inner()) = RunningStats {
            mean,
            var,
            initialized: true,
        };
        Ok(())
    }

    pub(crate) fn restore(&self, stats: RunningStats) {
        *self.running.lock().unwrap_or_else(|e| e.into_inner()) = stats;
    }

    fn update(&self, mean: &[f64], var_unbiased: &[f64]) {
        let mut r = self.running.lock().unwrap_or_else(|e| e.into_inner());
        let m = self.momentum;
        for c in 0..mean.len() {
            r.mean[c] = (1.0 - m) * r.mean[c] + m * mean[c];
            r.var[c] = (1.0 - m) * r.var[c] + m * var_unbiased[c];
        }
        r.initialized = true;
    }
}

/// `input [N, C, ...]`, `scale`/`shift [C]`.
pub fn batchnorm3d<T: Element>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    state: &BatchNormState,
    mode: Mode,
) -> Result<Tensor<T>> {
    if input.ndim() < 2 {
        return Err(Error::InvalidShape {
            op: "batchnorm3d",
            msg: format!("expected [N, C, ...], got {:?}", input.shape()),
        });
    }
    let (n, c) = (input.shape()[0], input.shape()[1]);
    if c != state.channels() || scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape("batchnorm3d", input.shape(), scale.shape()));
    }
    let s: usize = input.shape()[2..].iter().product();
    let count = n * s;
    let x = input.data();
    let eps = state.epsilon;

    let (mean, inv_std) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for item in 0..n {
                    let base = (item * c + ch) * s;
                    acc += x[base..base + s].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                mean[ch] = acc / count as f64;
                let mut sq = 0.0;
                for item in 0..n {
                    let base = (item * c + ch) * s;
                    sq += x[base..base + s]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean[ch];
                            d * d
                        })
                        .sum::<f64>();
                }
                var[ch] = sq / count as f64;
            }
            let unbiased: Vec<f64> = var
                .iter()
                .map(|&v| if count > 1 { v * count as f64 / (count - 1) as f64 } else { v })
                .collect();
            state.update(&mean, &unbiased);
            let inv = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect::<Vec<_>>();
            (mean, inv)
        }
        Mode::Eval => {
            let r = state.running();
            if !r.initialized {
                return Err(Error::RunningStatsUninitialized(state.name.clone()));
            }
            let inv = r.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            (r.mean, inv)
        }
    };

    let (gamma, beta) = (scale.data(), shift.data());
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for item in 0..n {
        for ch in 0..c {
            let base = (item * c + ch) * s;
            let (m, inv) = (T::from_f64(mean[ch]), T::from_f64(inv_std[ch]));
            for i in base..base + s {
                let h = (x[i] - m) * inv;
                xhat[i] = h;
                out[i] = h * gamma[ch] + beta[ch];
            }
        }
    }
    // backward materializes the gradient w.r.t. xhat, the same size as xhat
    let tracked = crate::tensor::is_grad_enabled() && (input.requires_grad() || scale.requires_grad() || shift.requires_grad());
    record_saved("batchnorm3d", xhat.len(), T::BYTES, tracked);

    let inv_std: Vec<T> = inv_std.into_iter().map(T::from_f64).collect();
    Ok(Tensor::from_op(
        "batchnorm3d",
        input.shape().to_vec(),
        out,
        vec![input.clone(), scale.clone(), shift.clone()],
        move |a| {
            let gamma = a.inputs[1].data();
            let g = a.grad;
            let mut gxhat = vec![T::zero(); g.len()];
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for item in 0..n {
                for ch in 0..c {
                    let base = (item * c + ch) * s;
                    for i in base..base + s {
                        gxhat[i] = g[i] * gamma[ch];
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            let gx = a.needs[0].then(|| {
                let m = T::from_f64(count as f64);
                for item in 0..n {
                    for ch in 0..c {
                        let base = (item * c + ch) * s;
                        let (inv, sg, sgx) = (inv_std[ch], gamma[ch] * sum_g[ch], gamma[ch] * sum_gx[ch]);
                        for i in base..base + s {
                            gxhat[i] = match mode {
                                Mode::Train => inv * (gxhat[i] - (sg + xhat[i] * sgx) / m),
                                Mode::Eval => inv * gxhat[i],
                            };
                        }
                    }
                }
                gxhat
            });
            vec![gx, a.needs[1].then(|| sum_gx.clone()), a.needs[2].then(|| sum_g.clone())]
        },
    ))
}
