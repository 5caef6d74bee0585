//! Central finite-difference gradient checking.
//!
//! Every hand-derived backward pass in this crate is validated against
//! [`finite_diff_check`] in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Absolute differences at or below this are treated as exact agreement.
pub const ABS_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: Option<usize>,
    /// Set when `f` produced a NaN or infinity at some probe point.
    pub non_finite: bool,
    pub pass: bool,
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let abs = (analytic - numeric).abs();
    if abs <= ABS_ERROR_FLOOR {
        0.0
    } else {
        abs / analytic.abs().max(numeric.abs())
    }
}

/// Compare `analytic_grad` with central differences of `f` around `x`.
pub fn finite_diff_check<F>(
    mut f: F,
    x: &Tensor<f64>,
    analytic_grad: &Tensor<f64>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if x.shape() != analytic_grad.shape() {
        return Err(Error::invalid(format!(
            "gradient shape {:?} does not match input shape {:?}",
            analytic_grad.shape(),
            x.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: None,
        non_finite: false,
        pass: true,
    };
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;

        let analytic = analytic_grad.data()[i];
        if !plus.is_finite() || !minus.is_finite() || !analytic.is_finite() {
            report.non_finite = true;
            report.pass = false;
            report.worst_index = Some(i);
            report.max_rel_error = f64::INFINITY;
            return Ok(report);
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = relative_error(analytic, numeric);
        let abs = (analytic - numeric).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_index = Some(i);
        }
    }
    report.pass = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_passes() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let g = Tensor::full(&[4], 1.0).unwrap();
        let r = finite_diff_check(|t| t.sum(), &x, &g, 1e-5, 1e-9).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn square_sum_passes() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![2.0, 4.0]).unwrap();
        let r = finite_diff_check(|t| t.data().iter().map(|v| v * v).sum(), &x, &g, 1e-5, 1e-6).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn negated_gradient_fails() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![-2.0, -4.0]).unwrap();
        let r = finite_diff_check(|t| t.data().iter().map(|v| v * v).sum(), &x, &g, 1e-5, 1e-6).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn non_finite_is_reported_not_raised() {
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let r = finite_diff_check(|t| 1.0 / (t.data()[0] - t.data()[0]), &x, &g, 1e-5, 1e-6).unwrap();
        assert!(r.non_finite);
        assert!(!r.pass);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(&[2]).unwrap();
        let g = Tensor::<f64>::zeros(&[3]).unwrap();
        assert!(finite_diff_check(|t| t.sum(), &x, &g, 1e-5, 1e-6).is_err());
    }
}
