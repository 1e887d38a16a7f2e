//! Named parameter storage shared by every model.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters attached to one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Binds vars already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects the gradient of every bound parameter in store order.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from U(-k, k), k = 1/sqrt(fan_in).
    pub fn matrix(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(&[fan_in, fan_out], bound, rng))
    }

    /// Embedding table `[rows, dim]`; each lookup has fan-in 1, so U(-1, 1).
    pub fn table(&mut self, name: impl Into<String>, rows: usize, dim: usize, rng: &mut Rng) -> ParamId {
        self.add(name, Tensor::uniform(&[rows, dim], 1.0, rng))
    }

    pub fn bias(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[len]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn attach(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        Bound { vars }
    }

    /// Attaches only the parameters for which `trainable` is true as gradient leaves.
    pub fn attach_where(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.names)
            .map(|(t, n)| tape.leaf(t.clone(), trainable(n)))
            .collect();
        Bound { vars }
    }

    /// Replaces parameter values, checking names and shapes.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, tensor)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "array {i}: expected '{}', found '{name}'",
                    self.names[i]
                )));
            }
            if tensor.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "array '{name}': expected shape {:?}, found {:?}",
                    self.tensors[i].shape(),
                    tensor.shape()
                )));
            }
            self.tensors[i] = tensor;
        }
        Ok(())
    }

    /// Rounds all values through single precision, the stored checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
