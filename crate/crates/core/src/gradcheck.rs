//! Central-finite-difference verification of tape gradients. Used by the
//! test suites; kept in the library so every crate checks gradients the same
//! way. The probe only re-runs forward passes, so it is independent of the
//! backward rules it checks.

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckCfg {
    /// Central-difference step.
    pub step: f64,
    /// Relative-error bound for entries above the absolute floor.
    pub rel_tol: f64,
    /// Differences below this pass outright (both sides numerically zero).
    pub abs_floor: f64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradReport {
    pub fn all_ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compare each parameter's accumulated gradient against central finite
/// differences of `loss`. The closure must re-run the full forward pass with
/// the parameters' current values (re-seeding any noise source so draws are
/// frozen across evaluations). Call after one forward+backward has populated
/// the gradients.
pub fn check_params(
    params: &[(String, Tensor)],
    mut loss: impl FnMut() -> f64,
    cfg: &GradCheckCfg,
) -> GradReport {
    let mut report = GradReport::default();
    for (name, tensor) in params {
        let analytic = tensor.grad_clone();
        for idx in 0..tensor.len() {
            let a = analytic
                .as_ref()
                .map_or(0.0, |g| g.data()[idx]);
            let orig = tensor.flat(idx);
            tensor.set_flat(idx, orig + cfg.step);
            let plus = loss();
            tensor.set_flat(idx, orig - cfg.step);
            let minus = loss();
            tensor.set_flat(idx, orig);
            let numeric = (plus - minus) / (2.0 * cfg.step);

            report.checked += 1;
            let diff = (a - numeric).abs();
            if diff <= cfg.abs_floor {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs());
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > cfg.rel_tol {
                report.mismatches.push(GradMismatch {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    report
}
