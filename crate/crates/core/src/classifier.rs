//! Bidirectional LSTM classifier over encoder features.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::model::CLASSIFIER_PREFIX;
use crate::nn::{uniform, Linear, ParamId, ParamStore, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Weights of one LSTM direction, gates ordered (input, forget, candidate,
/// output).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmDirection {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, hidden: usize) -> Self {
        let limit = 1.0 / (hidden as f64).sqrt();
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform(rng, &[fan_in, 4 * hidden], limit)),
            w_hh: store.add(format!("{name}.w_hh"), uniform(rng, &[hidden, 4 * hidden], limit)),
            bias: store.add(format!("{name}.bias"), Tensor::vector(&bias)),
        }
    }

    fn run(&self, s: &mut Session, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let wi = s.param(store, self.w_ih);
        let wh = s.param(store, self.w_hh);
        let b = s.param(store, self.bias);
        Ok(s.tape().lstm(x, wi, wh, b, reverse)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub input_dim: usize,
    pub hidden: usize,
    /// (forward, backward) per layer.
    pub layers: Vec<(LstmDirection, LstmDirection)>,
    pub head: Linear,
}

impl Classifier {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        classes: usize,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let fan_in = if l == 0 { input_dim } else { 2 * hidden };
                let name = format!("{CLASSIFIER_PREFIX}lstm{l}");
                (
                    LstmDirection::new(store, rng, &format!("{name}.fwd"), fan_in, hidden),
                    LstmDirection::new(store, rng, &format!("{name}.bwd"), fan_in, hidden),
                )
            })
            .collect();
        let head = Linear::new(store, rng, &format!("{CLASSIFIER_PREFIX}head"), 2 * hidden, classes);
        Self { input_dim, hidden, layers, head }
    }

    /// Per-step outputs `[T′, H]` of both directions of the last layer for
    /// features `[D, T′]`.
    pub fn directions(&self, s: &mut Session, store: &ParamStore, features: Var) -> Result<(Var, Var)> {
        let shape = s.tape().shape(features).to_vec();
        if shape.len() != 2 || shape[0] != self.input_dim {
            return Err(TensorError::shape(
                "classify",
                format!("features {shape:?} for input dimension {}", self.input_dim),
            )
            .into());
        }
        let mut seq = s.tape().transpose(features)?;
        let mut outputs = None;
        for (i, (fwd, bwd)) in self.layers.iter().enumerate() {
            let f = fwd.run(s, store, seq, false)?;
            let b = bwd.run(s, store, seq, true)?;
            if i + 1 < self.layers.len() {
                seq = s.tape().concat(&[f, b], 1)?;
            }
            outputs = Some((f, b));
        }
        Ok(outputs.expect("at least one layer"))
    }

    /// Logits from the forward direction's last state and the backward
    /// direction's state at the first step.
    pub fn forward(&self, s: &mut Session, store: &ParamStore, features: Var) -> Result<Var> {
        let (f, b) = self.directions(s, store, features)?;
        let steps = s.tape().shape(f)[0];
        let tape = s.tape();
        let last = tape.narrow(f, steps - 1, 1)?;
        let first = tape.narrow(b, 0, 1)?;
        let joined = tape.concat(&[last, first], 1)?;
        let joined = tape.reshape(joined, &[2 * self.hidden])?;
        self.head.forward(s, store, joined)
    }
}
