//! Model configuration and the assembled attention + encoder + classifier.

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::seed::{rng_from, TAG_INIT};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};
use crate::variants::{Attention, VariantKind};
use crate::vdan::{FeatureEncoder, Mode};

/// Extents of one input sample and the number of classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub subcarriers: usize,
    pub frames: usize,
    pub streams: usize,
    pub classes: usize,
}

impl InputShape {
    pub fn sample_shape(&self) -> [usize; 4] {
        [self.subcarriers, self.frames, self.streams, 2]
    }

    /// Channels seen by the feature encoder once real/imag and streams are
    /// folded into the subcarrier axis.
    pub fn encoder_channels(&self) -> usize {
        self.subcarriers * self.streams * 2
    }
}

/// Architecture hyperparameters independent of the data shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Output channels D of the feature encoder.
    pub feature_dim: usize,
    /// Output length T′ of the feature encoder.
    pub feature_len: usize,
    pub ratio_subcarrier: usize,
    pub ratio_time: usize,
    pub hidden_subcarrier: usize,
    pub hidden_time: usize,
    pub fusion_init: f64,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    /// Bottleneck width of the squeeze-excitation baseline.
    pub se_hidden: usize,
    /// Bottleneck width of the channel MLP in the CBAM-style baseline.
    pub cbam_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            feature_len: 25,
            ratio_subcarrier: 5,
            ratio_time: 10,
            hidden_subcarrier: 256,
            hidden_time: 96,
            fusion_init: 0.1,
            lstm_layers: 1,
            lstm_hidden: 32,
            se_hidden: 576,
            cbam_hidden: 644,
        }
    }
}

/// Temporal strides of the two encoder blocks.
pub const ENCODER_STRIDES: [usize; 2] = [2, 2];
pub const CONV_KERNEL: usize = 3;
pub const CBAM_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub shape: InputShape,
    pub arch: ArchConfig,
}

impl ModelConfig {
    pub fn new(shape: InputShape, arch: ArchConfig) -> Result<Self> {
        let cfg = Self { shape, arch };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        let s = &self.shape;
        let positive = [
            ("model.feature_dim", a.feature_dim),
            ("model.feature_len", a.feature_len),
            ("model.ratio_subcarrier", a.ratio_subcarrier),
            ("model.ratio_time", a.ratio_time),
            ("model.hidden_subcarrier", a.hidden_subcarrier),
            ("model.hidden_time", a.hidden_time),
            ("model.lstm_layers", a.lstm_layers),
            ("model.lstm_hidden", a.lstm_hidden),
            ("model.se_hidden", a.se_hidden),
            ("model.cbam_hidden", a.cbam_hidden),
            ("synth.subcarriers", s.subcarriers),
            ("synth.frames", s.frames),
            ("synth.streams", s.streams),
            ("synth.classes", s.classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let total_stride: usize = ENCODER_STRIDES.iter().product();
        if !s.frames.is_multiple_of(total_stride) {
            return Err(Error::config("synth.frames", format!("must be divisible by {total_stride}")));
        }
        if s.frames / total_stride != a.feature_len {
            return Err(Error::config(
                "model.feature_len",
                format!("encoder strides map {} frames to {}", s.frames, s.frames / total_stride),
            ));
        }
        if !a.fusion_init.is_finite() {
            return Err(Error::config("model.fusion_init", "must be finite"));
        }
        Ok(())
    }
}

/// Logits plus the attention outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    pub features: Var,
    pub kl_c: Option<Var>,
    pub kl_t: Option<Var>,
    /// Weights over subcarriers (or channels, for the attention baselines).
    pub w_c: Option<Var>,
    pub w_t: Option<Var>,
}

/// Attention module, feature encoder and classifier sharing one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub kind: VariantKind,
    pub store: ParamStore,
    pub attention: Attention,
    pub encoder: FeatureEncoder,
    pub classifier: Classifier,
}

/// Parameter name prefixes of the shared components.
pub const ENCODER_PREFIX: &str = "encoder.";
pub const CLASSIFIER_PREFIX: &str = "classifier.";

impl Model {
    pub fn new(kind: VariantKind, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, TAG_INIT, 0);
        let attention = Attention::new(kind, config, &mut store, &mut rng);
        let encoder = FeatureEncoder::new(
            &mut store,
            &mut rng,
            config.shape.encoder_channels(),
            config.arch.feature_dim,
            kind.encoder_strides(),
        );
        let classifier = Classifier::new(
            &mut store,
            &mut rng,
            config.arch.feature_dim,
            config.arch.lstm_hidden,
            config.arch.lstm_layers,
            config.shape.classes,
        );
        Ok(Self { config: config.clone(), kind, store, attention, encoder, classifier })
    }

    pub fn forward(&self, s: &mut Session, x: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        if x.shape() != self.config.shape.sample_shape() {
            return Err(Error::InvalidInput(format!(
                "input shape {:?} does not match model {:?}",
                x.shape(),
                self.config.shape.sample_shape()
            )));
        }
        let xv = s.tape().constant(x.clone());
        let att = self.attention.forward(s, &self.store, &self.encoder, xv, mode)?;
        let logits = self.classifier.forward(s, &self.store, att.features)?;
        Ok(ForwardOutput {
            logits,
            features: att.features,
            kl_c: att.kl_c,
            kl_t: att.kl_t,
            w_c: att.w_c,
            w_t: att.w_t,
        })
    }

    /// Parameters beyond the shared encoder and classifier.
    pub fn extra_params(&self) -> usize {
        self.store.count()
            - self.store.count_prefixed(ENCODER_PREFIX)
            - self.store.count_prefixed(CLASSIFIER_PREFIX)
    }
}

/// Plain values of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub features: Tensor,
    pub w_c: Option<Vec<f64>>,
    pub w_t: Option<Vec<f64>>,
}

impl Model {
    /// Runs `x` through the model on a private tape.
    pub fn infer(&self, x: &Tensor, mode: Mode) -> Result<Inference> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.store);
        let out = self.forward(&mut s, x, mode)?;
        let tape = s.tape();
        let read = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec());
        Ok(Inference {
            logits: tape.value(out.logits).data().to_vec(),
            features: tape.value(out.features).clone(),
            w_c: read(out.w_c),
            w_t: read(out.w_t),
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.infer(x, Mode::Infer)?.logits))
    }
}
