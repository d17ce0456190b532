//! Numerical gradient checking.
//!
//! Central finite differences over a black-box scalar function of matrix
//! parameters. Deliberately independent of the tape: it only re-evaluates
//! the function, so it can serve as the oracle for the analytic gradients.

use crate::autodiff::DenseMatrix;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation step for central differences.
    pub step: f64,
    /// Maximum allowed relative error.
    pub rel_tol: f64,
    /// Differences below this pass regardless of relative error.
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, rel_tol: 1e-4, abs_tol: 1e-8 }
    }
}

/// Central-difference gradient of `f` at `params`, one matrix per parameter.
pub fn central_diff<F>(mut f: F, params: &[DenseMatrix], step: f64) -> Result<Vec<DenseMatrix>>
where
    F: FnMut(&[DenseMatrix]) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<DenseMatrix> = params.to_vec();
    for pi in 0..params.len() {
        let mut g = DenseMatrix::zeros(params[pi].rows(), params[pi].cols());
        for idx in 0..params[pi].len() {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + step;
            let fp = f(&work)?;
            work[pi].data_mut()[idx] = orig - step;
            let fm = f(&work)?;
            work[pi].data_mut()[idx] = orig;
            g.data_mut()[idx] = (fp - fm) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compare analytic gradients against a numeric reference.
pub fn compare(
    analytic: &[DenseMatrix],
    numeric: &[DenseMatrix],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            report.checked += 1;
            let abs = (x - y).abs();
            let rel = abs / x.abs().max(y.abs()).max(f64::MIN_POSITIVE);
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > cfg.abs_tol {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > cfg.rel_tol {
                    report.failures += 1;
                }
            }
        }
    }
    report
}

/// End-to-end check: numeric reference from `f`, compared to `analytic`.
pub fn check<F>(
    f: F,
    params: &[DenseMatrix],
    analytic: &[DenseMatrix],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[DenseMatrix]) -> Result<f64>,
{
    let numeric = central_diff(f, params, cfg.step)?;
    Ok(compare(analytic, &numeric, cfg))
}
