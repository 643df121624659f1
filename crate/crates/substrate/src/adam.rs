//! Adam with bias correction.

use crate::checkpoint::Checkpoint;
use crate::error::{Result, SubstrateError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Stores moments as `adam.m.<name>` / `adam.v.<name>` and the step
    /// counter as `adam.t`.
    pub fn write_into(&self, store: &ParamStore, ckpt: &mut Checkpoint) {
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            ckpt.insert(format!("adam.m.{}", p.name), m.clone());
            ckpt.insert(format!("adam.v.{}", p.name), v.clone());
        }
        ckpt.insert("adam.t".into(), Tensor::scalar(self.t as f64));
    }

    pub fn read_from(store: &ParamStore, ckpt: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(store);
        for (i, (_, p)) in store.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut state.m[i]), ("adam.v.", &mut state.v[i])] {
                let key = format!("{prefix}{}", p.name);
                let t = ckpt
                    .get(&key)
                    .ok_or_else(|| SubstrateError::UnknownParameter(key.clone()))?;
                if t.shape() != p.value.shape() {
                    return Err(SubstrateError::ShapeMismatch {
                        name: key,
                        expected: p.value.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                *slot = t.clone();
            }
        }
        state.t = ckpt
            .get("adam.t")
            .ok_or_else(|| SubstrateError::UnknownParameter("adam.t".into()))?
            .item() as u64;
        Ok(state)
    }
}

/// One update using the gradients currently held in `store`. `lr` overrides
/// `cfg.lr` so schedules can drive it.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    for (_, p) in store.iter() {
        if !p.grad.is_finite() {
            return Err(SubstrateError::NonFiniteGradient(p.name.clone()));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
