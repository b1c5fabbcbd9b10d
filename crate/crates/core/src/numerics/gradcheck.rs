//! Central finite differences for validating backward rules.

use super::Tensor;
use crate::Result;

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// `(∂f/∂p)` by central differences at each `(tensor, element)` in `at`.
/// The parameters are restored before returning.
pub fn finite_differences<F>(
    params: &mut [Tensor<f64>],
    at: &[(usize, usize)],
    step: f64,
    mut f: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut out = Vec::with_capacity(at.len());
    for &(ti, ei) in at {
        let orig = params[ti].data()[ei];
        params[ti].data_mut()[ei] = orig + step;
        let plus = f(params);
        params[ti].data_mut()[ei] = orig - step;
        let minus = f(params);
        params[ti].data_mut()[ei] = orig;
        out.push((plus? - minus?) / (2.0 * step));
    }
    Ok(out)
}

/// Every `(tensor, element)` index of `params`.
pub fn all_indices(params: &[Tensor<f64>]) -> Vec<(usize, usize)> {
    params.iter().enumerate().flat_map(|(ti, t)| (0..t.numel()).map(move |ei| (ti, ei))).collect()
}

/// Agreement summary between autodiff and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn new(analytic: &[f64], numeric: &[f64]) -> Self {
        Self { errors: analytic.iter().zip(numeric).map(|(a, n)| relative_error(*a, *n)).collect() }
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    /// Fraction of entries with relative error below `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.errors.is_empty() {
            return 1.0;
        }
        self.errors.iter().filter(|e| **e < tol).count() as f64 / self.errors.len() as f64
    }
}
