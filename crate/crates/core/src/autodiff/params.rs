use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of parameter values. Arithmetic always runs in f64;
/// `F32` rounds stored values after every write so checkpoints are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
}

/// Named trainable tensors of one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            params: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        mut value: Tensor,
    ) -> Result<ParamId, AutodiffError> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        let precision = self.precision;
        value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = precision.round(*v));
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Overwrites values in place, applying the storage precision.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) {
        let precision = self.precision;
        let dst = self.params[id.0].value.data_mut();
        assert_eq!(dst.len(), values.len());
        for (d, &v) in dst.iter_mut().zip(values) {
            *d = precision.round(v);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
    }

    /// Matrix `[fan_in, fan_out]` drawn from uniform(±1/√fan_in).
    pub fn add_matrix<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId, AutodiffError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn add_bias(
        &mut self,
        name: impl Into<String>,
        size: usize,
    ) -> Result<ParamId, AutodiffError> {
        self.add(name, Tensor::zeros(&[size]))
    }

    /// Embedding table `[vocab, dim]` drawn from normal(0, dim^-1/2).
    pub fn add_embedding<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<ParamId, AutodiffError> {
        let dist = Normal::new(0.0, (dim as f64).powf(-0.5)).expect("positive std");
        let data = (0..vocab * dim).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(vec![vocab, dim], data)?)
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
