//! Central finite-difference verification of analytic gradients.
//!
//! Runs in `f64` only. The loss closure must be deterministic: seed any RNG
//! and disable dropout before checking.

use super::Tensor;

/// Per-parameter comparison between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1)`, worst element.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub elements: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare `analytic` gradients against central differences of `loss`.
///
/// `loss` is re-evaluated with each parameter element perturbed by `±h`;
/// the numeric gradient `(f(x+h) - f(x-h)) / 2h` is compared element-wise.
/// `analytic` entries are matched to `params` by position and must have the
/// same length; a missing gradient is treated as all-zero (a parameter the
/// loss genuinely does not touch).
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &mut [(String, Tensor<f64>)],
    analytic: &[Option<Vec<f64>>],
    h: f64,
    tol: f64,
) -> GradCheckReport
where
    F: FnMut(&[(String, Tensor<f64>)]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut reports = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params[pi].1.numel();
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for j in 0..n {
            let orig = params[pi].1.data()[j];
            params[pi].1.data_mut()[j] = orig + h;
            let fp = loss(params);
            params[pi].1.data_mut()[j] = orig - h;
            let fm = loss(params);
            params[pi].1.data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g[j]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            if abs > max_abs {
                max_abs = abs;
            }
        }
        reports.push(ParamReport {
            name: params[pi].0.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            elements: n,
        });
    }
    GradCheckReport {
        params: reports,
        h,
        tol,
    }
}
