//! Central-difference gradient checking.

use serde::{Deserialize, Serialize};

use crate::error::{ApdmError, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tol: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient returned by `loss_fn` at `params` with
/// central differences of its value. `loss_fn` must be deterministic
/// (replay any random draws).
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(ApdmError::config(format!("grad_check step h = {h} must be > 0")));
    }
    let (value, analytic) = loss_fn(params)?;
    if !value.is_finite() {
        return Err(ApdmError::numeric("loss is not finite at the check point"));
    }
    if analytic.len() != params.len() {
        return Err(ApdmError::usage("gradient length differs from parameter count"));
    }
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        tol,
        passed: false,
    };
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let (up, _) = loss_fn(&probe)?;
        probe[i] = params[i] - h;
        let (down, _) = loss_fn(&probe)?;
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(ApdmError::numeric(format!("loss not finite when perturbing coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err || i == 0 {
            report.max_rel_err = err;
            report.worst_coord = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
