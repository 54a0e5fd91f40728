use crate::autodiff::{value_and_grad, value_only, Graph, Var};
use crate::error::Result;
use crate::params::{BoundParams, ModelParams};

/// Absolute floor on the relative-error denominator, so gradients that are
/// zero analytically are judged against finite-difference noise of this size.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compares analytic gradients of `loss` against central differences
/// `(l(p + eps) - l(p - eps)) / (2 eps)` for every scalar parameter.
pub fn check_gradients<F>(params: &ModelParams, loss: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    assert!(eps > 0.0 && tol > 0.0, "eps and tol must be positive");
    let (_, analytic) = value_and_grad(params, &loss)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        tol,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.len());
        for k in 0..n {
            let orig = params.get(name).unwrap().data()[k];
            probe.get_mut(name).unwrap().data_mut()[k] = orig + eps;
            let up = value_only(&probe, &loss)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig - eps;
            let down = value_only(&probe, &loss)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(name).unwrap().data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), k));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
