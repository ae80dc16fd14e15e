use super::{NodeId, ParamStore, Tape};
use crate::error::Result;

/// Magnitudes below this are compared absolutely rather than relatively, so
/// that coordinates with a vanishing true gradient do not turn rounding noise
/// into a huge ratio.
const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares the tape gradient of `loss_fn` against central differences
/// `(L(p + eps) - L(p - eps)) / 2 eps` for every scalar in `params`.
pub fn finite_diff_check<F>(params: &ParamStore<f64>, eps: f64, loss_fn: F) -> Result<FdReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<NodeId>,
{
    finite_diff_check_adjusted(params, eps, loss_fn, |_| {})
}

/// Same as [`finite_diff_check`], but `adjust` may edit the analytic
/// gradients before comparison (used to prove that the check can fail).
pub fn finite_diff_check_adjusted<F, A>(
    params: &ParamStore<f64>,
    eps: f64,
    loss_fn: F,
    adjust: A,
) -> Result<FdReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<NodeId>,
    A: FnOnce(&mut ParamStore<f64>),
{
    let mut analytic = params.clone();
    analytic.zero_grads();
    let mut tape = Tape::new();
    let root = loss_fn(&analytic, &mut tape)?;
    tape.backward(root).accumulate_into(&mut analytic);
    adjust(&mut analytic);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let r = loss_fn(store, &mut t)?;
        Ok(t.scalar(r))
    };

    let mut probe = params.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
    };
    for e in 0..params.len() {
        let id = super::ParamId(e);
        for k in 0..params.entry(id).len() {
            let orig = probe.entry(id).value[k];
            probe.entry_mut(id).value[k] = orig + eps;
            let plus = eval(&probe)?;
            probe.entry_mut(id).value[k] = orig - eps;
            let minus = eval(&probe)?;
            probe.entry_mut(id).value[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.entry(id).grad[k], numeric);
            report.coordinates += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((params.entry(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_matches_to_machine_precision() {
        let mut store = ParamStore::<f64>::new();
        let p = store
            .insert("p", 5, 1, vec![0.3, -0.2, 0.9, 0.1, -0.5])
            .unwrap();
        let c = vec![1.0, -2.0, 0.5, 3.0, 0.25];
        let rep = finite_diff_check(&store, 1e-5, |s, t| {
            let x = t.param(s, p);
            t.dot_const(x, c.clone())
        })
        .unwrap();
        assert_eq!(rep.coordinates, 5);
        assert!(rep.max_rel_err < 1e-10, "{rep:?}");
    }

    #[test]
    fn quadratic_loss_is_exact_up_to_rounding() {
        let mut store = ParamStore::<f64>::new();
        let p = store.insert("p", 3, 1, vec![0.4, -1.1, 0.7]).unwrap();
        let rep = finite_diff_check(&store, 1e-3, |s, t| {
            let x = t.param(s, p);
            t.inner(x, x)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }
}
