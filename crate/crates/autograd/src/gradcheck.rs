//! Five-point central finite-difference gradient checks in `f64`.
//!
//! The check only evaluates forward passes to build its numerical estimate,
//! so it stays independent of every backward kernel it validates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;

/// Gradients smaller than this are compared in absolute terms.
pub const DENOM_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Step relative to `max(1, |θ|)`.
    pub step: f64,
    /// Elements sampled per parameter tensor; `None` checks every element.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, max_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares backward-pass gradients of the scalar built by `loss` against
/// fourth-order central differences, perturbing parameters in place.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        Ok(g.value(l).data()[0])
    };

    store.zero_grad();
    {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        g.backward(l, store)?;
    }

    let mut rng = Rng::stream(opts.seed, "gradcheck", 0);
    let mut report = GradCheckReport { params: Vec::new() };
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let len = store.get(id).value.len();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < len => (0..k).map(|_| rng.below(len)).collect(),
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &indices {
            let orig = store.get(id).value.data()[i];
            let h = opts.step * orig.abs().max(1.0);
            let mut at = |k: f64| -> Result<f64> {
                store.get_mut(id).value.data_mut()[i] = orig + k * h;
                eval(store)
            };
            let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let analytic = store.get(id).grad.data()[i];
            worst = worst.max(relative_error(analytic, numeric));
        }
        report.params.push(ParamCheck {
            name: store.get(id).name.clone(),
            checked: indices.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
