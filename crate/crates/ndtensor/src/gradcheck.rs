//! Finite-difference gradient checks with the five-point central stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
//!
//! Piecewise activations have kinks, and a stencil that straddles one gives
//! a meaningless estimate. The same samples also yield one-sided
//! second-order derivatives from the left and from the right; when these
//! disagree the step is halved, up to [`MAX_HALVINGS`] times.
//!
//! The relative error for one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` and a report
//! keeps the maximum over every checked coordinate.

use rand::seq::SliceRandom;
use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Label of the worst coordinate, e.g. `input 0 [5]` or `param w1 [12]`.
    pub worst: Option<String>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl FdReport {
    fn new(tolerance: f64) -> Self {
        FdReport {
            max_rel_error: 0.0,
            tolerance,
            checked: 0,
            worst: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(label());
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

/// Step halvings allowed when a kink falls inside the stencil.
pub const MAX_HALVINGS: u32 = 8;

fn one_sided_disagree(left: f64, right: f64) -> bool {
    (left - right).abs() > 1e-6 * left.abs().max(right.abs()) + 1e-9
}

fn five_point(mut at: impl FnMut(f64) -> Result<f64>, step: f64, center: f64) -> Result<f64> {
    let mut h = step;
    let mut halvings = 0;
    loop {
        let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
        let left = (3.0 * center - 4.0 * m1 + m2) / (2.0 * h);
        let right = (-3.0 * center + 4.0 * p1 - p2) / (2.0 * h);
        if halvings == MAX_HALVINGS || !one_sided_disagree(left, right) {
            return Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
        }
        h /= 2.0;
        halvings += 1;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Check the gradient of a scalar function of the given input tensors.
///
/// `f` rebuilds the computation on a fresh graph each time and returns the
/// scalar output.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let center = eval(inputs)?;
    let mut report = FdReport::new(tol);
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            let numeric = five_point(
                |dx| {
                    work[i].data_mut()[j] = orig + dx;
                    eval(&work)
                },
                step,
                center,
            )?;
            work[i].data_mut()[j] = orig;
            report.record(|| format!("input {i} [{j}]"), a, numeric);
        }
    }
    Ok(report)
}

/// Which parameter coordinates a [`check_param_gradients`] run perturbs.
#[derive(Clone, Debug)]
pub enum Coordinates {
    All,
    /// At most `per_param` coordinates of each parameter, chosen with `seed`.
    Sample { per_param: usize, seed: u64 },
}

/// Check parameter gradients of a scalar function built on a graph bound to
/// `store`. Only parameters listed in `params` are perturbed.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    params: &[ParamId],
    f: F,
    step: f64,
    tol: f64,
    coords: Coordinates,
) -> Result<FdReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        Ok(g.item(out))
    };

    let center = eval(store)?;
    let mut report = FdReport::new(tol);
    let mut work = store.clone();
    for &id in params {
        let numel = store.get(id).numel();
        let mut picks: Vec<usize> = (0..numel).collect();
        if let Coordinates::Sample { per_param, seed } = coords {
            let mut rng = StdRng::seed_from_u64(seed ^ id.index() as u64);
            picks.shuffle(&mut rng);
            picks.truncate(per_param);
            picks.sort_unstable();
        }
        for j in picks {
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let orig = work.get(id).data()[j];
            let numeric = five_point(
                |dx| {
                    work.get_mut(id).data_mut()[j] = orig + dx;
                    eval(&work)
                },
                step,
                center,
            )?;
            work.get_mut(id).data_mut()[j] = orig;
            report.record(|| format!("param {} [{j}]", store.name(id)), a, numeric);
        }
    }
    Ok(report)
}
