use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::Real;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |a - n| / max(1e-8, |a| + |n|)` over every checked coordinate.
    pub max_rel_error: Real,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: Real,
    pub numeric_at_worst: Real,
    pub coordinates: usize,
}

/// Checks every parameter of `store`. See [`grad_check_params`].
pub fn grad_check<F>(store: &mut ParamStore, h: Real, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, &ids, h, f)
}

/// Compares the tape gradient of the scalar built by `f` with
/// `(f(θ+h) - f(θ-h)) / 2h`, coordinate by coordinate, over `ids`.
pub fn grad_check_params<F>(store: &mut ParamStore, ids: &[ParamId], h: Real, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    grad_check_floor(store, ids, h, 1e-8, f)
}

/// As [`grad_check_params`] with `floor` in place of `1e-8` in the
/// denominator `max(floor, |a| + |n|)`. A larger floor turns the check into
/// an absolute one for coordinates whose gradient is at the level of
/// finite-difference round-off.
pub fn grad_check_floor<F>(store: &mut ParamStore, ids: &[ParamId], h: Real, floor: Real, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    let eval = |store: &ParamStore| -> Result<Real> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for &id in ids {
        let n = store.value(id).len();
        for j in 0..n {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = (analytic - numeric).abs() / floor.max(analytic.abs() + numeric.abs());
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), j));
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
