use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, ParameterSet};

pub const DEFAULT_LR: f64 = 9e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moments per parameter, in parameter-set order.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParameterSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value().numel()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the accumulated gradients. Does
    /// not zero them.
    pub fn step(&mut self, params: &mut ParameterSet<T>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Config("optimizer state does not match the parameter set".into()));
        }
        let grads = params
            .iter()
            .map(|p| p.grad().ok_or_else(|| Error::MissingGradient(p.name().to_string())))
            .collect::<Result<Vec<_>>>()?;
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.epsilon));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.value().to_vec();
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + eps);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// Early stopping on a metric where larger is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopMonitor {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
}

impl StopMonitor {
    pub fn new(patience: usize) -> Self {
        StopMonitor {
            patience,
            best: None,
            best_epoch: None,
            since_improvement: 0,
        }
    }

    /// Records an epoch's metric; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement > self.patience
    }
}
