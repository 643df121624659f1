//! Central-difference gradient verification.

use rand::seq::index::sample;

use crate::graph::{Gradients, Graph, Var};
use crate::param::ParamStore;
use crate::rng::stream;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub delta: f64,
    pub tol: f64,
    /// Coordinates checked per parameter; smaller parameters are checked fully.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            delta: 1e-5,
            tol: 1e-4,
            samples_per_param: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn coordinates_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// Compares `analytic` against central differences of `loss`. The error per
/// coordinate is `|analytic − numeric| / max(1, |analytic|)`. A parameter
/// missing from `analytic` is treated as having zero gradient.
pub fn check_gradients(
    store: &mut ParamStore,
    analytic: &Gradients,
    mut loss: impl FnMut(&ParamStore) -> f64,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let mut rng = stream(cfg.seed, "gradcheck");
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut params = Vec::new();
    for id in ids {
        let numel = store.get(id).value.numel();
        let coords: Vec<usize> = if numel <= cfg.samples_per_param {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, cfg.samples_per_param).into_vec()
        };
        let mut max_err: f64 = 0.0;
        for &c in &coords {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + cfg.delta;
            let up = loss(store);
            store.get_mut(id).value.data_mut()[c] = orig - cfg.delta;
            let down = loss(store);
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * cfg.delta);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[c]);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            max_err = max_err.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            checked: coords.len(),
            max_rel_err: max_err,
        });
    }
    GradCheckReport { params, tol: cfg.tol }
}

/// Builds the loss with `build`, differentiates it, and checks every
/// parameter against central differences.
pub fn finite_diff_check(
    store: &mut ParamStore,
    build: impl Fn(&mut Graph) -> Var,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let analytic = {
        let mut g = Graph::new(store);
        let l = build(&mut g);
        g.backward(l)
    };
    check_gradients(
        store,
        &analytic,
        |s| {
            let mut g = Graph::inference(s);
            let l = build(&mut g);
            g.value(l).item()
        },
        cfg,
    )
}
