use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::error::{Result, SubstrateError};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(SubstrateError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| SubstrateError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for p in &self.params {
            ckpt.insert(p.name.clone(), p.value.clone());
        }
        ckpt
    }

    /// Overwrites every parameter value from `ckpt`. Extra entries in the
    /// checkpoint are ignored; missing or mis-shaped ones are errors.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for p in &mut self.params {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| SubstrateError::UnknownParameter(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(SubstrateError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    /// Uniform in ±√(6/(fan_in+fan_out)).
    pub fn xavier_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Tensor::matrix(fan_in, fan_out, data)
    }

    pub fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..numel).map(|_| dist.sample(rng)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            s.add("w", Tensor::zeros(&[1])),
            Err(SubstrateError::DuplicateParameter(_))
        ));
        assert_eq!(s.get(s.id("w").unwrap()).grad.shape(), &[2, 2]);
    }

    #[test]
    fn xavier_bounds() {
        let mut rng = stream(1, "init");
        let t = init::xavier_uniform(&mut rng, 16, 48);
        let a = (6.0f64 / 64.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < a));
    }

    #[test]
    fn load_rejects_shape_change() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut ck = Checkpoint::new();
        ck.insert("w".into(), Tensor::zeros(&[4]));
        assert!(matches!(
            s.load_checkpoint(&ck),
            Err(SubstrateError::ShapeMismatch { .. })
        ));
    }
}
