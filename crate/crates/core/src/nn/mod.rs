//! Parameters, the forward context, and transformer encoder blocks.

mod encoder;

pub use encoder::{
    encoder_layer, encoder_stack, multi_head_self_attention, AttentionMask, AttentionOutput, EncoderLayerParams,
    LN_EPS,
};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of every trainable tensor of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Builds parameters with seeded initializers.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Initializer<'_> {
    /// Xavier/Glorot-uniform `[fan_in, fan_out]` weight.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.uniform_range(-limit, limit)).collect();
        self.store.add(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.normal(0.0, std)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::filled(shape, 1.0))
    }
}

/// One forward (and optionally backward) pass: a fresh tape with every
/// parameter bound as a gradient-tracking leaf.
pub struct Ctx {
    pub tape: Tape,
    params: Vec<Var>,
    pub rng: Rng,
    pub training: bool,
    pub dropout: f64,
}

impl Ctx {
    pub fn new(store: &ParamStore, rng: Rng, training: bool, dropout: f64) -> Self {
        let mut tape = Tape::new();
        let params = store.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Self {
            tape,
            params,
            rng,
            training,
            dropout,
        }
    }

    /// Evaluation-mode context (dropout disabled).
    pub fn eval(store: &ParamStore) -> Self {
        Self::new(store, Rng::new(0), false, 0.0)
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Gradients per parameter after `tape.backward`, in store order.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.params
            .iter()
            .map(|&v| self.tape.grad(v).map(<[f64]>::to_vec))
            .collect()
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let (p, training) = (self.dropout, self.training);
        self.tape.dropout(x, p, &mut self.rng, training)
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        self.tape.linear(x, w, Some(b))
    }
}
