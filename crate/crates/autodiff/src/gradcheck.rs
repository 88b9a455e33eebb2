//! Central-difference verification of backward-pass gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::{Graph, ParamStore, Result, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Entries whose true
    /// gradient is at the finite-difference noise level are compared
    /// absolutely against this floor.
    pub floor: f64,
    /// Check at most this many coordinates per parameter tensor (chosen at
    /// random); `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-5,
            floor: 1e-4,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_error={:.3e} (tol {:.1e}) at {}[{}] analytic={:.6e} numeric={:.6e} over {} coords",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.worst_param,
            self.worst_index,
            self.analytic,
            self.numeric,
            self.coords_checked
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Backward-pass gradients of the scalar `f` with respect to every parameter
/// in `store`, one vector per parameter. Existing accumulators are cleared.
pub fn analytic_gradients<F>(store: &mut ParamStore, f: &mut F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_param_grads(store);
    let grads = store.params().iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();
    Ok(grads)
}

fn evaluate<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    Ok(g.value(out).data()[0])
}

/// Compares supplied gradients against central differences of `f`.
pub fn compare_gradients<F, R>(
    store: &mut ParamStore,
    analytic: &[Vec<f64>],
    f: &mut F,
    opts: &GradCheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        tolerance: opts.tolerance,
    };
    for pi in 0..store.len() {
        let id = store.ids().nth(pi).expect("index in range");
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + opts.h;
            let plus = evaluate(store, f)?;
            store.get_mut(id).value.data_mut()[c] = orig - opts.h;
            let minus = evaluate(store, f)?;
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[pi][c];
            let err = relative_error(a, numeric, opts.floor);
            report.coords_checked += 1;
            if report.worst_param.is_empty() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Full check: backward-pass gradients of `f` against central differences.
pub fn grad_check<F, R>(store: &mut ParamStore, mut f: F, opts: &GradCheckOptions, rng: &mut R) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic = analytic_gradients(store, &mut f)?;
    compare_gradients(store, &analytic, &mut f, opts, rng)
}
