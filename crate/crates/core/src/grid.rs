//! Dense n-d grids of scalars with voxel spacing, used for volumes, label
//! maps and probability maps outside the differentiation graph.

use crate::error::{Error, Result};
use crate::tensor::numel;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<E> {
    dims: Vec<usize>,
    /// Physical voxel size in micrometres, (z, y, x).
    spacing: [f64; 3],
    data: Vec<E>,
}

/// Image intensities.
pub type Volume = Grid<f32>;
/// Integer class ids.
pub type LabelVolume = Grid<u8>;

impl<E: Copy> Grid<E> {
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if numel(&dims) != data.len() || dims.is_empty() {
            return Err(Error::Data(format!(
                "grid dims {dims:?} need {} elements, got {}",
                numel(&dims),
                data.len()
            )));
        }
        Ok(Grid {
            dims,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn filled(dims: Vec<usize>, value: E) -> Self {
        let n = numel(&dims);
        Grid {
            dims,
            spacing: [1.0; 3],
            data: vec![value; n],
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> E {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: E) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// The box `[origin, origin + size)` per axis; cells outside the grid
    /// take `fill`.
    pub fn crop_padded(&self, origin: &[isize], size: &[usize], fill: E) -> Grid<E> {
        assert_eq!(origin.len(), self.dims.len());
        assert_eq!(size.len(), self.dims.len());
        let nd = self.dims.len();
        let mut out = Grid::filled(size.to_vec(), fill);
        out.spacing = self.spacing;
        if size.iter().any(|&s| s == 0) {
            return out;
        }
        // Per axis, the overlap of the box with the grid in box coordinates.
        let mut lo = vec![0usize; nd];
        let mut hi = vec![0usize; nd];
        for k in 0..nd {
            let start = (-origin[k]).max(0) as usize;
            let end = (self.dims[k] as isize - origin[k]).clamp(0, size[k] as isize) as usize;
            if start >= end {
                return out;
            }
            lo[k] = start;
            hi[k] = end;
        }
        let run = hi[nd - 1] - lo[nd - 1];
        let mut idx = lo.clone();
        loop {
            let dst = out.offset(&idx);
            let src_idx: Vec<usize> = (0..nd).map(|k| (idx[k] as isize + origin[k]) as usize).collect();
            let src = self.offset(&src_idx);
            out.data[dst..dst + run].copy_from_slice(&self.data[src..src + run]);
            // advance all axes except the last
            let mut k = nd - 1;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < hi[k] {
                    break;
                }
                idx[k] = lo[k];
            }
        }
    }

    /// Nearest-neighbour downsampling on every axis: output index `i` reads
    /// input index `factor·i`.
    pub fn downsample_nearest(&self, factor: usize) -> Grid<E> {
        self.downsample_nearest_axes(factor, 0)
    }

    /// Like [`downsample_nearest`](Self::downsample_nearest) but leaves the
    /// first `skip` axes (batch/channel) untouched.
    pub fn downsample_nearest_axes(&self, factor: usize, skip: usize) -> Grid<E> {
        assert!(factor >= 1);
        let dims: Vec<usize> = self
            .dims
            .iter()
            .enumerate()
            .map(|(k, &d)| if k < skip { d } else { d.div_ceil(factor) })
            .collect();
        let mut out = Vec::with_capacity(numel(&dims));
        let nd = dims.len();
        let mut idx = vec![0usize; nd];
        let mut src = vec![0usize; nd];
        for _ in 0..numel(&dims) {
            for k in 0..nd {
                src[k] = if k < skip { idx[k] } else { idx[k] * factor };
            }
            out.push(self.get(&src));
            for k in (0..nd).rev() {
                idx[k] += 1;
                if idx[k] < dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Grid {
            dims,
            spacing: self.spacing.map(|s| s * factor as f64),
            data: out,
        }
    }
}

impl<E: Copy + PartialEq> Grid<E> {
    pub fn count(&self, v: E) -> usize {
        self.data.iter().filter(|&&x| x == v).count()
    }
}
