//! Central finite-difference verification of analytic gradients.

use super::nn::HasParams;
use crate::error::{Error, Result};

/// Gradients smaller than this in magnitude are compared absolutely.
pub const NEAR_ZERO: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// coordinates where that scale exceeds [`NEAR_ZERO`].
    pub max_relative_error: f64,
    /// Largest `|analytic - numeric|` over the near-zero coordinates.
    pub max_near_zero_abs_error: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_relative_error < rel_tol && self.max_near_zero_abs_error < abs_tol
    }
}

/// Compares engine gradients against central differences with step `h`.
///
/// `loss` must compute the scalar loss of `model` and accumulate its gradients
/// into the parameters; gradients are zeroed before every call. Parameter values
/// are restored exactly after each perturbation.
pub fn finite_difference_check<M, F>(model: &mut M, mut loss: F, h: f64) -> Result<GradCheckReport>
where
    M: HasParams,
    F: FnMut(&mut M) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Invalid(format!("step h must be positive, got {h}")));
    }
    model.zero_grad();
    let base = loss(model)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad().into_data())
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_near_zero_abs_error: 0.0,
        coordinates: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let original = model.params()[pi].value.data()[ci];
            let mut eval = |model: &mut M, v: f64| -> Result<f64> {
                model.params_mut()[pi].value.data_mut()[ci] = v;
                model.zero_grad();
                let l = loss(model)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at perturbed coordinate {ci} of parameter {pi}"
                    )));
                }
                Ok(l)
            };
            let plus = eval(model, original + h)?;
            let minus = eval(model, original - h)?;
            model.params_mut()[pi].value.data_mut()[ci] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if scale > NEAR_ZERO {
                report.max_relative_error = report.max_relative_error.max(abs / scale);
            } else {
                report.max_near_zero_abs_error = report.max_near_zero_abs_error.max(abs);
            }
            report.coordinates += 1;
        }
    }
    // leave the model holding the analytic gradient at the original point
    model.zero_grad();
    loss(model)?;
    Ok(report)
}
