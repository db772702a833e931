use serde::Serialize;

use super::graph::{Graph, ParamGrads, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Relative error is |a − n| / max(|a|, |n|, abs_floor); the floor keeps
    /// vanishing gradients from amplifying float round-off.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compare reverse-mode gradients of `f` against central differences for
/// every coordinate of `params`.
pub fn finite_diff_check<F>(f: F, store: &ParamStore, params: &[ParamId], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let analytic = g.backward_params(loss)?;
    check_gradients(f, store, params, &analytic, opts)
}

/// Central-difference comparison against externally supplied gradients.
pub fn check_gradients<F>(
    f: F,
    store: &ParamStore,
    params: &[ParamId],
    analytic: &ParamGrads,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let first = eval(&f, store)?;
    let second = eval(&f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(first, second));
    }
    let mut work = store.clone();
    let mut checks = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.value(id).numel();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            coords: n,
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..n {
            let orig = store.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + opts.h;
            let plus = eval(&f, &work)?;
            work.value_mut(id).data_mut()[k] = orig - opts.h;
            let minus = eval(&f, &work)?;
            work.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic.get(id).map_or(0.0, |g| g[k]);
            let err = relative_error(a, numeric, opts.abs_floor);
            if err > check.max_rel_error || k == 0 {
                check.max_rel_error = err;
                check.worst_coord = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    let max = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error: max,
        tol: opts.tol,
        params: checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(3.0));
        let report = finite_diff_check(
            |s, g| {
                let v = g.param(s, p);
                let sq = g.mul(v, v);
                Ok(g.sum(sq))
            },
            &store,
            &[p],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!((report.params[0].analytic - 6.0).abs() < 1e-12);
        assert!((report.params[0].numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_parts(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let report = finite_diff_check(
            |_, g| Ok(g.constant(Tensor::scalar(4.2))),
            &store,
            &[p],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.params[0].numeric, 0.0);
    }

    #[test]
    fn nondeterminism_detected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.0));
        let counter = Cell::new(0.0);
        let err = finite_diff_check(
            |s, g| {
                counter.set(counter.get() + 1.0);
                let v = g.param(s, p);
                let k = g.constant(Tensor::scalar(counter.get()));
                let m = g.mul(v, k);
                Ok(g.sum(m))
            },
            &store,
            &[p],
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(..)));
    }

    #[test]
    fn corrupted_gradient_detected() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_parts(vec![1, 2], vec![0.5, -1.5]));
        let f = |s: &ParamStore, g: &mut Graph| {
            let v = g.param(s, p);
            let e = g.exp(v);
            Ok(g.sum(e))
        };
        let mut g = Graph::new();
        let loss = f(&store, &mut g).unwrap();
        let mut grads = g.backward_params(loss).unwrap();
        grads.grads.get_mut(&p).unwrap()[1] *= 1.01;
        let report = check_gradients(f, &store, &[p], &grads, GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.params[0].worst_coord, 1);
    }
}
