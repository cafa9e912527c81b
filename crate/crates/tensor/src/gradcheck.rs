//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
    /// Entries probed per tensor, spread evenly over its elements.
    pub samples_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            abs_floor: 1e-6,
            samples_per_tensor: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradMismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Compares `analytic` gradients against central differences of `loss`.
///
/// The error for each tensor is `‖a − n‖ / max(‖a‖, ‖n‖, abs_floor)` over the
/// probed entries, so a single near-zero entry is judged against the scale
/// of its tensor rather than against finite-difference round-off.
///
/// `loss` must evaluate the same function the analytic gradients came from,
/// reading every perturbed tensor out of the store it is handed.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    cfg: GradCheckConfig,
    loss: impl Fn(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for (name, grad) in analytic {
        let n = grad.numel();
        let samples = cfg.samples_per_tensor.min(n);
        let mut seen = Vec::with_capacity(samples);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let mut worst_entry: Option<(usize, f64, f64)> = None;
        for j in 0..samples {
            let idx = ((j * n) / samples + (n / samples) / 2).min(n - 1);
            if seen.contains(&idx) {
                continue;
            }
            seen.push(idx);
            let orig = store.get(name).expect("gradient for unknown tensor").data()[idx];
            probe.get_mut(name).unwrap().data_mut()[idx] = orig + cfg.step;
            let up = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[idx] = orig - cfg.step;
            let down = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad.data()[idx];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            report.checked += 1;
            if worst_entry.is_none_or(|(_, wa, wn)| (a - numeric).abs() > (wa - wn).abs()) {
                worst_entry = Some((idx, a, numeric));
            }
        }
        let Some((index, a, numeric)) = worst_entry else { continue };
        let rel_err = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(cfg.abs_floor);
        if report.worst.is_none() || rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst = Some(GradMismatch {
                name: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    report
}
