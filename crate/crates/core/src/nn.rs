//! Named parameter storage and the per-step binding of parameters to a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Number of scalar entries in parameters whose name starts with `prefix`.
    pub fn count_prefixed(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Replaces every value, checking names and shapes.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (i, (name, value)) in named.into_iter().enumerate() {
            if name != self.names[i] || value.shape() != self.values[i].shape() {
                return Err(Error::InvalidInput(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    value.shape()
                )));
            }
            self.values[i] = value;
        }
        Ok(())
    }
}

/// Parameters placed on one tape, bound lazily on first use.
pub struct Session<'t> {
    tape: &'t mut Tape,
    bound: Vec<Option<Var>>,
}

impl<'t> Session<'t> {
    pub fn new(tape: &'t mut Tape, store: &ParamStore) -> Self {
        Self { tape, bound: vec![None; store.len()] }
    }

    /// Session whose parameters are already on the tape as `vars`, one per
    /// store entry in order.
    pub fn with_vars(tape: &'t mut Tape, vars: &[Var]) -> Self {
        Self { tape, bound: vars.iter().copied().map(Some).collect() }
    }

    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Runs backward from `loss` and returns one gradient per store entry,
    /// zero for parameters the loss never touched.
    pub fn gradients(self, store: &ParamStore, loss: Var) -> Result<Vec<Vec<f64>>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .zip(store.values())
            .map(|(b, v)| match b {
                Some(var) => grads.get_or_zeros(*var, v.len()),
                None => vec![0.0; v.len()],
            })
            .collect())
    }
}

/// Uniform Glorot initialisation for a `[fan_in, fan_out]` weight.
pub fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, limit)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is non-empty")
}

/// Dense layer `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, &[fan_in, fan_out], fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward(&self, s: &mut Session, store: &ParamStore, x: Var) -> Result<Var> {
        let w = s.param(store, self.weight);
        let b = s.param(store, self.bias);
        Ok(s.tape().affine(x, w, b)?)
    }
}
