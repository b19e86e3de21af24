//! Dense double-precision tensors with tape-based reverse-mode
//! differentiation, the handful of neural-network layers the prediction
//! network needs, an Adam optimizer and a checkpoint format.

mod checkpoint;
mod gradcheck;
mod nn;
mod optim;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry};
pub use gradcheck::{finite_difference_check, FdReport, ParamFdStats};
pub use nn::{linear, max_pool_neighbors, shared_mlp_forward};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::mix as tape_mix;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, x) in slot.iter_mut().zip(g) {
            *s += x;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Treat as a matrix: all leading dimensions fold into rows.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [.., c] => (self.data.len() / c.max(&1), *c),
        }
    }
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace a parameter.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor) {
        let (k, v) = self.params.get_index(i).expect("parameter index in range");
        (k.as_str(), v)
    }

    pub(crate) fn by_index_mut(&mut self, i: usize) -> &mut Tensor {
        self.params.get_index_mut(i).expect("parameter index in range").1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    /// Weight `[fan_in × fan_out]` drawn uniformly in ±sqrt(6 / (fan_in + fan_out)),
    /// plus a zero bias `[fan_out]`.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
        self.insert(format!("{prefix}.weight"), Tensor::new(vec![fan_in, fan_out], w).expect("consistent shape"));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]));
    }

    /// All-zero linear layer.
    pub fn init_linear_zero(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{prefix}.weight"), Tensor::zeros(vec![fan_in, fan_out]));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]));
    }
}
