//! Central finite-difference gradient checking.

use serde::Serialize;

/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare the analytic gradient returned by `objective` at `params` against
/// central differences with step `eps`, coordinate by coordinate.
///
/// `objective` maps a parameter vector to `(value, gradient)`.
pub fn finite_diff_check<F>(mut objective: F, params: &[f64], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = objective(params);
    assert_eq!(
        analytic.len(),
        params.len(),
        "objective returned a gradient of the wrong length"
    );
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: params.len(),
    };
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let (plus, _) = objective(&work);
        work[i] = orig - eps;
        let (minus, _) = objective(&work);
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}
