//! Variational dual-path attention preprocessing for CSI gesture recognition.

pub mod checkpoint;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod seed;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod variants;
pub mod vdan;

pub use error::{Error, FormatError, Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use synth::{CsiSample, SynthConfig};
pub use tensor::Tensor;
