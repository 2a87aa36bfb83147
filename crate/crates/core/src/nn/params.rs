use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Non-trainable entries hold buffers such as
/// running normalization statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    /// He-style uniform initialization `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    pub fn add_he_uniform<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = libm::sqrt(6.0 / fan_in as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }
    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }
    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.values.iter().zip(&self.trainable).filter(|(_, t)| **t).map(|(v, _)| v.len()).sum()
    }

    pub fn zero_grads(&self) -> GradStore {
        GradStore { grads: self.values.iter().map(|v| Tensor::zeros(v.shape())).collect() }
    }

    /// Rounds every value to the nearest f32 (32-bit parameter storage).
    pub fn round_to_f32(&mut self) {
        for v in self.values.iter_mut() {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Gradient accumulator aligned with a [`Params`] set.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }
    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut() {
            g.scale(s);
        }
    }
    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }
    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.grads.iter().map(|g| g.dot(g)).sum())
    }
}
