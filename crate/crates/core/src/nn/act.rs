use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_op("relu", x.shape().to_vec(), data, vec![x.clone()], |a| {
        let x = a.inputs[0].data();
        let g = a
            .grad
            .iter()
            .zip(x)
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(g)]
    })
}

/// Softmax over axis 1 of `[N, K, ...]`, with max subtraction per voxel.
pub fn softmax_channels<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.ndim() < 2 || logits.shape()[1] < 2 {
        return Err(Error::InvalidShape {
            op: "softmax_channels",
            msg: format!("need [N, K>=2, ...], got {:?}", logits.shape()),
        });
    }
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    let s: usize = logits.shape()[2..].iter().product();
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for item in 0..n {
        let base = item * k * s;
        for v in 0..s {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(x[base + c * s + v]);
            }
            let mut total = T::zero();
            for c in 0..k {
                let e = (x[base + c * s + v] - m).exp();
                out[base + c * s + v] = e;
                total += e;
            }
            for c in 0..k {
                out[base + c * s + v] = out[base + c * s + v] / total;
            }
        }
    }
    Ok(Tensor::from_op("softmax", logits.shape().to_vec(), out, vec![logits.clone()], move |a| {
        let y = a.output;
        let mut g = vec![T::zero(); y.len()];
        for item in 0..n {
            let base = item * k * s;
            for v in 0..s {
                let mut dot = T::zero();
                for c in 0..k {
                    dot += a.grad[base + c * s + v] * y[base + c * s + v];
                }
                for c in 0..k {
                    let i = base + c * s + v;
                    g[i] = y[i] * (a.grad[i] - dot);
                }
            }
        }
        vec![Some(g)]
    }))
}
