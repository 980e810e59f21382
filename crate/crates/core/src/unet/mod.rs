//! The three network variants: standard U-net, meU-net (auxiliary head at
//! decoder level 2, gated level 1 for expanded patches) and the
//! post-concatenation U-net that takes stage-1 guidance at every decoder
//! level.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{load_checkpoint, network_digest, read_manifest, save_checkpoint, CheckpointManifest, NormEntry, ParamEntry};
pub use config::{NetworkKind, UNetConfig};
pub use network::{parameter_level, DualLogits, Network, NetworkState};

use crate::error::{Error, Result};
use crate::grid::LabelVolume;
use crate::nn::{downsample_nearest_tensor, one_hot};
use crate::tensor::{Element, Tensor};

/// One-hot guidance for decoder levels `1..=levels`; level `l` is the
/// nearest-neighbour downsampling of level 1 by `2^(l−1)`.
#[derive(Clone, Debug)]
pub struct GuidancePyramid<T: Element> {
    levels: Vec<Tensor<T>>,
}

impl<T: Element> GuidancePyramid<T> {
    /// Builds `count` levels from a level-1 one-hot `[N, K, D, H, W]`.
    pub fn from_one_hot(level1: Tensor<T>, count: usize) -> Result<Self> {
        if level1.ndim() != 5 || count == 0 {
            return Err(Error::InvalidShape {
                op: "guidance",
                msg: format!("need a [N, K, D, H, W] one-hot and ≥ 1 level, got {:?}", level1.shape()),
            });
        }
        let level1 = level1.detach();
        let mut levels = Vec::with_capacity(count);
        for l in 1..count {
            levels.push(downsample_nearest_tensor(&level1, 1 << l)?);
        }
        levels.insert(0, level1);
        Ok(GuidancePyramid { levels })
    }

    pub fn from_labels(labels: &[&LabelVolume], classes: usize, count: usize) -> Result<Self> {
        Self::from_one_hot(one_hot(labels, classes)?, count)
    }

    /// Stacks single-item pyramids along the batch axis.
    pub fn concat_batch(parts: &[GuidancePyramid<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Data("empty guidance batch".into()))?;
        if parts.len() == 1 {
            return Ok(first.clone());
        }
        let mut levels = Vec::with_capacity(first.levels());
        for l in 0..first.levels() {
            let items = parts
                .iter()
                .map(|p| p.levels.get(l).cloned().ok_or_else(|| Error::Config("guidance depth mismatch".into())))
                .collect::<Result<Vec<_>>>()?;
            levels.push(Tensor::concat(&items, 0)?);
        }
        Ok(GuidancePyramid { levels })
    }

    /// Number of decoder levels covered.
    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> Result<&Tensor<T>> {
        level
            .checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .ok_or_else(|| Error::Config(format!("guidance pyramid has no level {level}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn pyramid_levels_are_nearest_downsamples() {
        let labels: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
        let g = Grid::new(vec![4, 4, 4], labels).unwrap();
        let p = GuidancePyramid::<f64>::from_labels(&[&g], 3, 3).unwrap();
        assert_eq!(p.level(2).unwrap().shape(), &[1, 3, 2, 2, 2]);
        assert_eq!(p.level(3).unwrap().shape(), &[1, 3, 1, 1, 1]);
        let small = g.downsample_nearest(2);
        let want = one_hot::<f64>(&[&small], 3).unwrap();
        assert_eq!(p.level(2).unwrap().data(), want.data());
        // channel sums are one everywhere
        let l2 = p.level(2).unwrap().data();
        for v in 0..8 {
            assert_eq!(l2[v] + l2[8 + v] + l2[16 + v], 1.0);
        }
        assert!(p.level(0).is_err() && p.level(4).is_err());
    }
}
