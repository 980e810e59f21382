//! Class-imbalance-aware segmentation losses.
//!
//! Class weights come from a softmax over inverse class frequencies,
//! `weight_i = softmax_i(Σcount / count_i)`; the Dice term is the mean over
//! classes of `1 − 2ΣLP / (ΣL + ΣP + ε)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelVolume;
use crate::nn::{one_hot, softmax_channels};
use crate::tensor::{Element, Tensor};

pub const DICE_EPSILON: f64 = 1e-5;
/// Floor applied to probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Voxel counts per class over a label corpus.
pub fn count_classes<'a>(labels: impl IntoIterator<Item = &'a LabelVolume>, classes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; classes];
    for grid in labels {
        for &l in grid.data() {
            let slot = counts
                .get_mut(l as usize)
                .ok_or(Error::LabelOutOfRange { label: l, classes })?;
            *slot += 1;
        }
    }
    Ok(counts)
}

pub fn class_weights(counts: &[u64]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::Config("class weights need at least one class".into()));
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ZeroCount { class });
    }
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let ratios: Vec<f64> = counts.iter().map(|&c| total / c as f64).collect();
    let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = ratios.iter().map(|r| (r - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(ClassWeights {
        weights: exps.iter().map(|e| e / z).collect(),
    })
}

/// Mean over classes of the soft Dice loss; sums run over batch and voxels.
pub fn soft_dice_loss<T: Element>(probs: &Tensor<T>, target: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    if probs.shape() != target.shape() || probs.ndim() < 2 {
        return Err(Error::shape("soft_dice_loss", probs.shape(), target.shape()));
    }
    let inter = probs.mul(target)?.sum_except(1)?;
    let denom = target
        .sum_except(1)?
        .add(&probs.sum_except(1)?)?
        .add_scalar(T::from_f64(epsilon));
    let per_class = inter.mul_scalar(T::from_f64(2.0)).div(&denom)?;
    Ok(per_class.neg().add_scalar(T::one()).mean())
}

/// Mean over voxels of `w[y]·(−ln p[y])`, with `target` the one-hot of `y`.
pub fn weighted_cross_entropy_one_hot<T: Element>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    weights: &ClassWeights,
) -> Result<Tensor<T>> {
    if probs.shape() != target.shape() || probs.ndim() < 2 {
        return Err(Error::shape("weighted_cross_entropy", probs.shape(), target.shape()));
    }
    let k = probs.shape()[1];
    if weights.len() != k {
        return Err(Error::shape("weighted_cross_entropy", probs.shape(), &[weights.len()]));
    }
    let voxels = probs.numel() / k;
    let w = Tensor::from_vec(vec![k], weights.weights.iter().map(|&v| T::from_f64(v)).collect())?;
    let nll = probs
        .clamp_min(T::from_f64(PROB_FLOOR))
        .log()
        .mul(target)?
        .scale_along(1, &w)?
        .sum();
    Ok(nll.mul_scalar(T::from_f64(-1.0 / voxels as f64)))
}

pub fn weighted_cross_entropy<T: Element>(
    probs: &Tensor<T>,
    labels: &[&LabelVolume],
    weights: &ClassWeights,
) -> Result<Tensor<T>> {
    let target = one_hot(labels, probs.shape().get(1).copied().unwrap_or(0))?;
    weighted_cross_entropy_one_hot(probs, &target, weights)
}

/// Softmax, then soft Dice + weighted cross-entropy with equal weight.
pub fn combined_loss_one_hot<T: Element>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    weights: &ClassWeights,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let probs = softmax_channels(logits)?;
    let dice = soft_dice_loss(&probs, target, epsilon)?;
    let ce = weighted_cross_entropy_one_hot(&probs, target, weights)?;
    dice.add(&ce)
}

pub fn combined_loss<T: Element>(
    logits: &Tensor<T>,
    labels: &[&LabelVolume],
    weights: &ClassWeights,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let target = one_hot(labels, logits.shape().get(1).copied().unwrap_or(0))?;
    combined_loss_one_hot(logits, &target, weights, epsilon)
}
