//! Central finite-difference checks of analytic gradients (64-bit only).
//!
//! The numeric side evaluates the forward function alone, so it is
//! independent of every backward closure it checks.

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Step used for all checks.
pub const STEP: f64 = 1e-6;

/// Relative error with an absolute floor on the denominator, so components
/// that are zero up to rounding do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(&mut self, other: &GradCheck) {
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.checked += other.checked;
    }
}

/// Compares the gradient of `f` (a scalar function of several tensors) with
/// central differences at every coordinate of every input.
pub fn check<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F) -> Result<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    check_coords(inputs, None, f)
}

/// Like [`check`], restricted to the listed `(input, coordinate)` pairs.
pub fn check_coords<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    coords: Option<&[(usize, usize)]>,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves = inputs
        .iter()
        .map(|(s, d)| Tensor::leaf(s.clone(), d.clone()))
        .collect::<Result<Vec<_>>>()?;
    f(&leaves)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, (_, d))| (0..d.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let eval = |which: usize, at: usize, delta: f64| -> Result<f64> {
        let ts = inputs
            .iter()
            .enumerate()
            .map(|(i, (s, d))| {
                let mut d = d.clone();
                if i == which {
                    d[at] += delta;
                }
                Tensor::from_vec(s.clone(), d)
            })
            .collect::<Result<Vec<_>>>()?;
        no_grad(|| f(&ts)).map(|t| t.item())
    };

    let mut report = GradCheck::default();
    for &(i, j) in coords {
        let numeric = (eval(i, j, STEP)? - eval(i, j, -STEP)?) / (2.0 * STEP);
        let err = relative_error(analytic[i][j], numeric, 1e-6);
        report.max_relative_error = report.max_relative_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
