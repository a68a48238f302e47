//! Named parameter storage shared by models, optimizers, and checkpoints.
//!
//! Parameters are registered once in a fixed order; that order defines both
//! the optimizer slot layout and the checkpoint serialization order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{NodeId, Tape, Tensor};

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { params: Vec::new() }
    }

    /// Register a parameter under a unique name. Panics on a duplicate name,
    /// which is always a builder bug.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name: {name}"
        );
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Record every parameter as a leaf on the tape, returning node ids
    /// indexed by `ParamId`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }
}

/// Uniform Glorot initialization: ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("glorot shape is valid")
}
