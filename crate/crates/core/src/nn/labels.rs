//! Label-map helpers: one-hot encoding and nearest-neighbour downsampling.

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelVolume};
use crate::tensor::{Element, Tensor};

/// Encodes a batch of equally shaped label maps as `[N, K, ...dims]`.
pub fn one_hot<T: Element>(labels: &[&LabelVolume], classes: usize) -> Result<Tensor<T>> {
    let first = labels.first().ok_or_else(|| Error::Data("one_hot on an empty batch".into()))?;
    let dims = first.dims().to_vec();
    let s = first.len();
    let mut data = vec![T::zero(); labels.len() * classes * s];
    for (item, grid) in labels.iter().enumerate() {
        if grid.dims() != dims.as_slice() {
            return Err(Error::shape("one_hot", &dims, grid.dims()));
        }
        for (v, &l) in grid.data().iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            data[(item * classes + l as usize) * s + v] = T::one();
        }
    }
    let mut shape = vec![labels.len(), classes];
    shape.extend_from_slice(&dims);
    Ok(Tensor::from_op_const("one_hot", shape, data))
}

/// Nearest-neighbour label downsampling: index `factor·i` on every axis.
pub fn downsample_labels_nearest(labels: &LabelVolume, factor: usize) -> LabelVolume {
    labels.downsample_nearest(factor)
}

/// Nearest-neighbour downsampling of the spatial axes of a `[N, C, ...]`
/// tensor. Not differentiable.
pub fn downsample_nearest_tensor<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let grid = Grid::new(x.shape().to_vec(), x.to_vec())?;
    let small = grid.downsample_nearest_axes(factor, 2);
    let shape = small.dims().to_vec();
    Ok(Tensor::from_op_const("downsample_nearest", shape, small.into_data()))
}

/// Per-voxel argmax over axis 0 of a `[K, ...]` array, lowest index on ties.
pub fn argmax_channels<E: Copy + PartialOrd>(probs: &[E], classes: usize) -> Vec<u8> {
    let s = probs.len() / classes;
    (0..s)
        .map(|v| {
            let mut best = 0;
            for c in 1..classes {
                if probs[c * s + v] > probs[best * s + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
