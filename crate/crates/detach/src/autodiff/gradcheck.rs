//! Central-difference verification of tape gradients.

use super::tape::{Tape, TapeError, Var};
use super::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Coordinate (flat index into `x0`) where the max occurred.
    pub worst_index: usize,
    /// A NaN/Inf appeared in a forward evaluation; reported as a failure
    /// instead of a crash, with `max_rel_error = +inf`.
    pub non_finite_forward: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite_forward && self.max_rel_error < tol
    }
}

/// Check the tape gradient of a scalar-valued function `f` at `x0` against
/// central differences with step `eps`.
///
/// `f` receives a fresh tape and the leaf holding the probe point and must
/// return a scalar node. Shape errors from `f` propagate; non-finite forward
/// values are folded into the report.
pub fn grad_check<F>(f: F, x0: &Tensor, eps: f64) -> Result<GradCheckReport, TapeError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TapeError>,
{
    let eval = |probe: &Tensor| -> Result<f64, TapeError> {
        let mut tape = Tape::new();
        let x = tape.leaf(probe.clone());
        let y = f(&mut tape, x)?;
        let v = tape.value(y);
        if v.len() != 1 {
            return Err(TapeError::NonScalarLoss { shape: v.shape().to_vec() });
        }
        Ok(v.item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let mut seed = x0.clone();
    seed.requires_grad = true;
    let x = tape.leaf(seed);
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(TapeError::NonScalarLoss { shape: tape.value(y).shape().to_vec() });
    }
    let y0 = tape.value(y).item();
    if !y0.is_finite() {
        return Ok(GradCheckReport { max_rel_error: f64::INFINITY, worst_index: 0, non_finite_forward: true });
    }
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x0.len()]);

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst_index: 0, non_finite_forward: false };
    let mut probe = x0.clone();
    probe.requires_grad = false;
    for i in 0..x0.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Ok(GradCheckReport { max_rel_error: f64::INFINITY, worst_index: i, non_finite_forward: true });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
