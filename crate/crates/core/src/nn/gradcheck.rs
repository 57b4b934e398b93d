//! Central finite-difference gradient checks.

use crate::error::Result;

use super::params::{Gradients, ParamStore};

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Compare analytic gradients of `loss` against central differences with
/// step `eps` on every scalar of `params` (or every `stride`-th one).
///
/// `loss` is re-evaluated on perturbed copies of `params`; `grads` must be
/// the analytic gradient at the unperturbed point.
pub fn check_gradients(
    params: &ParamStore,
    grads: &Gradients,
    eps: f64,
    stride: usize,
    floor: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheck> {
    let base = params.flat();
    let analytic = grads.flat();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in (0..base.len()).step_by(stride.max(1)) {
        let mut x = base.clone();
        x[i] = base[i] + eps;
        probe.set_flat(&x)?;
        let up = loss(&probe)?;
        x[i] = base[i] - eps;
        probe.set_flat(&x)?;
        let down = loss(&probe)?;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric, floor));
        checked += 1;
    }
    Ok(GradCheck {
        max_relative_error: worst,
        checked,
    })
}
