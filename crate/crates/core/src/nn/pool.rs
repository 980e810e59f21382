//! Factor-2 max pooling and nearest-neighbour upsampling over the three
//! spatial axes of `[N, C, D, H, W]` tensors.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn spatial<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, d, h, w] => Ok((n * c, d, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("expected [N, C, D, H, W], got {:?}", x.shape()),
        }),
    }
}

/// Each output voxel is the max of its 2³ block. The gradient is routed to
/// the first maximal element in scan order.
pub fn maxpool3d<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, d, h, w) = spatial("maxpool3d", x)?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "maxpool3d",
            msg: format!("spatial extents of {:?} must be even", x.shape()),
        });
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let (s_in, s_out) = (d * h * w, od * oh * ow);
    let xs = x.data();
    let mut out = Vec::with_capacity(planes * s_out);
    let mut arg = Vec::with_capacity(planes * s_out);
    for p in 0..planes {
        let base = p * s_in;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = base + ((2 * z) * h + 2 * y) * w + 2 * xx;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx;
                            for dx in 0..2 {
                                let v = xs[row + dx];
                                if v > best {
                                    best = v;
                                    best_i = row + dx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2..].copy_from_slice(&[od, oh, ow]);
    let n_in = x.numel();
    Ok(Tensor::from_op("maxpool3d", shape, out, vec![x.clone()], move |a| {
        let mut g = vec![T::zero(); n_in];
        for (&i, &gv) in arg.iter().zip(a.grad) {
            g[i as usize] += gv;
        }
        vec![Some(g)]
    }))
}

/// Replicates each voxel into a 2³ block; the gradient sums each block.
pub fn upsample_nearest3d<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, d, h, w) = spatial("upsample_nearest3d", x)?;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let (s_in, s_out) = (d * h * w, od * oh * ow);
    let xs = x.data();
    let mut out = vec![T::zero(); planes * s_out];
    for p in 0..planes {
        let src = &xs[p * s_in..(p + 1) * s_in];
        let dst = &mut out[p * s_out..(p + 1) * s_out];
        for z in 0..od {
            for y in 0..oh {
                let srow = ((z / 2) * h + y / 2) * w;
                let drow = (z * oh + y) * ow;
                for xx in 0..ow {
                    dst[drow + xx] = src[srow + xx / 2];
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2..].copy_from_slice(&[od, oh, ow]);
    let n_in = x.numel();
    Ok(Tensor::from_op("upsample_nearest3d", shape, out, vec![x.clone()], move |a| {
        let mut g = vec![T::zero(); n_in];
        for p in 0..planes {
            let gi = &mut g[p * s_in..(p + 1) * s_in];
            let go = &a.grad[p * s_out..(p + 1) * s_out];
            for z in 0..od {
                for y in 0..oh {
                    let srow = ((z / 2) * h + y / 2) * w;
                    let drow = (z * oh + y) * ow;
                    for xx in 0..ow {
                        gi[srow + xx / 2] += go[drow + xx];
                    }
                }
            }
        }
        vec![Some(g)]
    }))
}
