//! Elementwise, reduction and shape operations.

use std::ops::Range;

use super::{numel, BackwardArgs, Element, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Calls `f(src_offset, dst_offset, run)` for every contiguous run of the
/// last axis when copying the box `ranges` of `src_shape` into a dense array
/// of the box's shape.
fn for_each_box_row(src_shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize, usize, usize)) {
    let nd = src_shape.len();
    if nd == 0 {
        f(0, 0, 1);
        return;
    }
    let strides = row_major_strides(src_shape);
    let extents: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
    if extents.iter().any(|&e| e == 0) {
        return;
    }
    let run = extents[nd - 1];
    let rows: usize = extents[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    for row in 0..rows {
        let src: usize = (0..nd)
            .map(|k| (ranges[k].start + if k < nd - 1 { idx[k] } else { 0 }) * strides[k])
            .sum();
        f(src, row * run, run);
        for k in (0..nd - 1).rev() {
            idx[k] += 1;
            if idx[k] < extents[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

fn unary<T: Element>(
    x: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Tensor<T> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(op, x.shape().to_vec(), data, vec![x.clone()], move |a: &BackwardArgs<'_, T>| {
        let xin = a.inputs[0].data();
        let g = a
            .grad
            .iter()
            .zip(xin.iter().zip(a.output))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(g)]
    })
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op("add", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |a| {
            vec![
                a.needs[0].then(|| a.grad.to_vec()),
                a.needs[1].then(|| a.grad.to_vec()),
            ]
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op("sub", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |a| {
            vec![
                a.needs[0].then(|| a.grad.to_vec()),
                a.needs[1].then(|| a.grad.iter().map(|&g| -g).collect()),
            ]
        }))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op("mul", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |a| {
            let (x, y) = (a.inputs[0].data(), a.inputs[1].data());
            vec![
                a.needs[0].then(|| a.grad.iter().zip(y).map(|(&g, &y)| g * y).collect()),
                a.needs[1].then(|| a.grad.iter().zip(x).map(|(&g, &x)| g * x).collect()),
            ]
        }))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("div", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a / b).collect();
        Ok(Tensor::from_op("div", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |a| {
            let (x, y) = (a.inputs[0].data(), a.inputs[1].data());
            vec![
                a.needs[0].then(|| a.grad.iter().zip(y).map(|(&g, &y)| g / y).collect()),
                a.needs[1].then(|| {
                    a.grad
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect()
                }),
            ]
        }))
    }

    pub fn neg(&self) -> Tensor<T> {
        unary(self, "neg", |v| -v, |_, _| -T::one())
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        unary(self, "add_scalar", move |v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        unary(self, "mul_scalar", move |v| v * s, move |_, _| s)
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, "exp", |v| v.exp(), |_, y| y)
    }

    pub fn log(&self) -> Tensor<T> {
        unary(self, "log", |v| v.ln(), |x, _| x.recip())
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: T) -> Tensor<T> {
        unary(
            self,
            "clamp_min",
            move |v| if v > floor { v } else { floor },
            move |x, _| if x > floor { T::one() } else { T::zero() },
        )
    }

    /// Sum of all elements as a shape-`[]` tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum::<T>();
        let n = self.numel();
        Tensor::from_op("sum", Vec::new(), vec![s], vec![self.clone()], move |a| {
            vec![Some(vec![a.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::from_f64(1.0 / n as f64);
        let s = self.data().iter().copied().sum::<T>() * inv;
        Tensor::from_op("mean", Vec::new(), vec![s], vec![self.clone()], move |a| {
            vec![Some(vec![a.grad[0] * inv; n])]
        })
    }

    /// Maximum element; the gradient goes to the first maximal position.
    pub fn max(&self) -> Tensor<T> {
        let (arg, m) = self
            .data()
            .iter()
            .enumerate()
            .fold((0usize, T::neg_infinity()), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
        let n = self.numel();
        Tensor::from_op("max", Vec::new(), vec![m], vec![self.clone()], move |a| {
            let mut g = vec![T::zero(); n];
            g[arg] = a.grad[0];
            vec![Some(g)]
        })
    }

    /// 1 where `self > other`, else 0. Not differentiable.
    pub fn gt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("gt", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| if a > b { T::one() } else { T::zero() })
            .collect();
        Ok(Tensor::from_op_const("gt", self.shape().to_vec(), data))
    }

    /// 1 where `self > s`, else 0. Not differentiable.
    pub fn gt_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&a| if a > s { T::one() } else { T::zero() }).collect();
        Tensor::from_op_const("gt_scalar", self.shape().to_vec(), data)
    }

    /// 1 where `self == s`, else 0. Not differentiable.
    pub fn eq_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&a| if a == s { T::one() } else { T::zero() }).collect();
        Tensor::from_op_const("eq_scalar", self.shape().to_vec(), data)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        if numel(&shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), &shape));
        }
        Ok(Tensor::from_op("reshape", shape, self.to_vec(), vec![self.clone()], |a| {
            vec![Some(a.grad.to_vec())]
        }))
    }

    /// Box crop; one range per axis.
    pub fn slice(&self, ranges: &[Range<usize>]) -> Result<Tensor<T>> {
        if ranges.len() != self.ndim()
            || ranges.iter().zip(self.shape()).any(|(r, &e)| r.start > r.end || r.end > e)
        {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("ranges {ranges:?} do not fit shape {:?}", self.shape()),
            });
        }
        let shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let src = self.data();
        let mut data = vec![T::zero(); numel(&shape)];
        for_each_box_row(self.shape(), ranges, |s, d, n| data[d..d + n].copy_from_slice(&src[s..s + n]));
        let in_shape = self.shape().to_vec();
        let ranges = ranges.to_vec();
        Ok(Tensor::from_op("slice", shape, data, vec![self.clone()], move |a| {
            let mut g = vec![T::zero(); numel(&in_shape)];
            for_each_box_row(&in_shape, &ranges, |s, d, n| g[s..s + n].copy_from_slice(&a.grad[d..d + n]));
            vec![Some(g)]
        }))
    }

    /// Zero padding; `(before, after)` per axis.
    pub fn pad_zeros(&self, pads: &[(usize, usize)]) -> Result<Tensor<T>> {
        if pads.len() != self.ndim() {
            return Err(Error::InvalidShape {
                op: "pad_zeros",
                msg: format!("{} pad pairs for a rank-{} tensor", pads.len(), self.ndim()),
            });
        }
        let shape: Vec<usize> = self.shape().iter().zip(pads).map(|(&e, &(b, a))| e + b + a).collect();
        let ranges: Vec<Range<usize>> = self.shape().iter().zip(pads).map(|(&e, &(b, _))| b..b + e).collect();
        let src = self.data();
        let mut data = vec![T::zero(); numel(&shape)];
        for_each_box_row(&shape, &ranges, |s, d, n| data[s..s + n].copy_from_slice(&src[d..d + n]));
        let in_n = self.numel();
        let out_shape = shape.clone();
        Ok(Tensor::from_op("pad_zeros", shape, data, vec![self.clone()], move |a| {
            let mut g = vec![T::zero(); in_n];
            for_each_box_row(&out_shape, &ranges, |s, d, n| g[d..d + n].copy_from_slice(&a.grad[s..s + n]));
            vec![Some(g)]
        }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        if axis >= first.ndim() {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {:?}", first.shape()),
            });
        }
        for p in &parts[1..] {
            let ok = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        Ok(Tensor::from_op("concat", shape, data, parts.to_vec(), move |a| {
            let mut offset = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let start = offset;
                    offset += w;
                    a.needs[i].then(|| {
                        let mut g = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            g.extend_from_slice(&a.grad[o * total + start..o * total + start + w]);
                        }
                        g
                    })
                })
                .collect()
        }))
    }

    /// Sums over every axis except `axis`, giving shape `[extent(axis)]`.
    pub fn sum_except(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::InvalidShape {
                op: "sum_except",
                msg: format!("axis {axis} out of range for shape {:?}", self.shape()),
            });
        }
        let c = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![T::zero(); c];
        for o in 0..outer {
            for (ch, acc) in out.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                *acc += x[base..base + inner].iter().copied().sum::<T>();
            }
        }
        let n = self.numel();
        Ok(Tensor::from_op("sum_except", vec![c], out, vec![self.clone()], move |a| {
            let mut g = vec![T::zero(); n];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    g[base..base + inner].iter_mut().for_each(|v| *v = a.grad[ch]);
                }
            }
            vec![Some(g)]
        }))
    }

    /// Multiplies every slice along `axis` by the matching entry of `scales` (shape `[extent(axis)]`).
    pub fn scale_along(&self, axis: usize, scales: &Tensor<T>) -> Result<Tensor<T>> {
        if axis >= self.ndim() || scales.shape() != [self.shape()[axis]] {
            return Err(Error::shape("scale_along", self.shape(), scales.shape()));
        }
        let c = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let (x, s) = (self.data(), scales.data());
        let mut data = x.to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v *= s[ch]);
            }
        }
        Ok(Tensor::from_op(
            "scale_along",
            self.shape().to_vec(),
            data,
            vec![self.clone(), scales.clone()],
            move |a| {
                let (x, s) = (a.inputs[0].data(), a.inputs[1].data());
                let gx = a.needs[0].then(|| {
                    let mut g = a.grad.to_vec();
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            g[base..base + inner].iter_mut().for_each(|v| *v *= s[ch]);
                        }
                    }
                    g
                });
                let gs = a.needs[1].then(|| {
                    let mut g = vec![T::zero(); c];
                    for o in 0..outer {
                        for (ch, acc) in g.iter_mut().enumerate() {
                            let base = (o * c + ch) * inner;
                            *acc += a.grad[base..base + inner]
                                .iter()
                                .zip(&x[base..base + inner])
                                .map(|(&g, &x)| g * x)
                                .sum::<T>();
                        }
                    }
                    g
                });
                vec![gx, gs]
            },
        ))
    }
}
