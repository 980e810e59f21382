//! Sliding-window inference with centre-weighted fusion, and Dice scoring.

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelVolume, Volume};
use crate::nn::argmax_channels;
use crate::sampler::{crop_cube, spatial_dims, tile_origins};
use crate::tensor::{Element, Tensor};

/// Per-voxel patch weights: 2 inside the centred cube of edge `P/2`, 1 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionMask {
    edge: usize,
    weights: Vec<f64>,
}

impl FusionMask {
    pub fn new(edge: usize) -> Self {
        let lo = (edge - edge / 2) / 2;
        let hi = lo + edge / 2;
        let inside = |i: usize| (lo..hi).contains(&i);
        let mut weights = Vec::with_capacity(edge * edge * edge);
        for z in 0..edge {
            for y in 0..edge {
                for x in 0..edge {
                    weights.push(if inside(z) && inside(y) && inside(x) { 2.0 } else { 1.0 });
                }
            }
        }
        FusionMask { edge, weights }
    }

    pub fn edge(&self) -> usize {
        self.edge
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Fused class probabilities `[K, D, H, W]` and their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Fused {
    pub probs: Grid<f64>,
    pub labels: LabelVolume,
}

impl Fused {
    pub fn classes(&self) -> usize {
        self.probs.dims()[0]
    }

    pub fn probs_f32(&self) -> Grid<f32> {
        Grid::new(self.probs.dims().to_vec(), self.probs.data().iter().map(|&p| p as f32).collect())
            .expect("same element count")
            .with_spacing(self.probs.spacing())
    }
}

/// Builds a [`Fused`] from probabilities, taking the lowest-index argmax.
pub fn fused_from_probs(probs: Grid<f64>) -> Result<Fused> {
    let k = *probs.dims().first().ok_or_else(|| Error::Data("empty probability grid".into()))?;
    let labels = Grid::new(probs.dims()[1..].to_vec(), argmax_channels(probs.data(), k))?.with_spacing(probs.spacing());
    Ok(Fused { probs, labels })
}

/// Runs `logits_fn(origin, patch)` on every tile in z-major order and fuses
/// the per-patch softmax with [`FusionMask`] weights. `logits_fn` returns
/// `[1, K, P, P, P]` logits.
pub fn fuse_predict<T, F>(image: &Volume, patch: usize, stride: usize, mut logits_fn: F) -> Result<Fused>
where
    T: Element,
    F: FnMut([usize; 3], &Volume) -> Result<Tensor<T>>,
{
    let dims = spatial_dims(image.dims())?;
    if image.is_empty() {
        return Err(Error::Data("cannot predict an empty volume".into()));
    }
    if stride == 0 || stride > patch {
        return Err(Error::Config(format!("need 1 ≤ stride ≤ patch, got {stride} for {patch}")));
    }
    let mask = FusionMask::new(patch);
    let s = image.len();
    let ps = patch * patch * patch;
    let mut acc: Vec<f64> = Vec::new();
    let mut wsum = vec![0.0f64; s];
    let mut classes = 0;
    let labels_dummy = Grid::filled(image.dims().to_vec(), 0u8);
    for origin in tile_origins(dims, patch, stride) {
        let (crop, _) = crop_cube(image, &labels_dummy, origin.map(|o| o as isize), patch);
        let logits = logits_fn(origin, &crop)?;
        let k = match *logits.shape() {
            [1, k, a, b, c] if a == patch && b == patch && c == patch => k,
            _ => return Err(Error::shape("fuse_predict", &[1, classes, patch, patch, patch], logits.shape())),
        };
        if classes == 0 {
            classes = k;
            acc = vec![0.0; k * s];
        } else if k != classes {
            return Err(Error::shape("fuse_predict", &[classes], &[k]));
        }
        let l = logits.to_f64_vec();
        let mut p = vec![0.0f64; k];
        for z in 0..patch {
            let gz = origin[0] + z;
            if gz >= dims[0] {
                break;
            }
            for y in 0..patch {
                let gy = origin[1] + y;
                if gy >= dims[1] {
                    break;
                }
                for x in 0..patch {
                    let gx = origin[2] + x;
                    if gx >= dims[2] {
                        break;
                    }
                    let pv = (z * patch + y) * patch + x;
                    let gv = (gz * dims[1] + gy) * dims[2] + gx;
                    softmax_at(&l, k, ps, pv, &mut p);
                    let w = mask.weights[pv];
                    for c in 0..k {
                        acc[c * s + gv] += w * p[c];
                    }
                    wsum[gv] += w;
                }
            }
        }
    }
    for c in 0..classes {
        for v in 0..s {
            acc[c * s + v] /= wsum[v];
        }
    }
    let mut pd = vec![classes];
    pd.extend_from_slice(&dims);
    fused_from_probs(Grid::new(pd, acc)?.with_spacing(image.spacing()))
}

fn softmax_at(logits: &[f64], k: usize, stride: usize, v: usize, out: &mut [f64]) {
    let max = (0..k).map(|c| logits[c * stride + v]).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for c in 0..k {
        out[c] = (logits[c * stride + v] - max).exp();
        z += out[c];
    }
    out.iter_mut().for_each(|p| *p /= z);
}

/// `2|A∩B| / (|A| + |B|)` for class `class`; 1.0 when both are empty.
pub fn dice_metric(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("dice_metric", pred.dims(), truth.dims()));
    }
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (ip, it) = (p == class, t == class);
        a += ip as u64;
        b += it as u64;
        both += (ip && it) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Dice for every class `0..classes`.
pub fn dice_per_class(pred: &LabelVolume, truth: &LabelVolume, classes: usize) -> Result<Vec<f64>> {
    (0..classes).map(|c| dice_metric(pred, truth, c as u8)).collect()
}
