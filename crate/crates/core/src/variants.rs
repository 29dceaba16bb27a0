//! Ablation variants and attention baselines sharing the VDAN interface.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, CBAM_KERNEL, ENCODER_STRIDES};
use crate::nn::{uniform, Linear, ParamId, ParamStore, Session};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::vdan::{
    latent_dim, recalibrate, subcarrier_descriptor, time_descriptor, variational_weights, kl_divergence,
    FeatureEncoder, Mode, PathAxis, VariationalPath, Vdan,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum VariantKind {
    Baseline,
    SapOnly,
    TapOnly,
    DualDet,
    SeStyle,
    CbamStyle,
    FullVdan,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::Baseline,
        VariantKind::SapOnly,
        VariantKind::TapOnly,
        VariantKind::DualDet,
        VariantKind::SeStyle,
        VariantKind::CbamStyle,
        VariantKind::FullVdan,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Baseline => "baseline",
            VariantKind::SapOnly => "sap",
            VariantKind::TapOnly => "tap",
            VariantKind::DualDet => "dual-det",
            VariantKind::SeStyle => "se",
            VariantKind::CbamStyle => "cbam",
            VariantKind::FullVdan => "vdan",
        }
    }

    /// Stable numeric code used in checkpoints.
    pub fn code(self) -> u32 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Subcarrier-only attention halves the encoder's second stride and
    /// pools over time afterwards instead.
    pub fn encoder_strides(self) -> [usize; 2] {
        match self {
            VariantKind::SapOnly => [ENCODER_STRIDES[0], 1],
            _ => ENCODER_STRIDES,
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant `{s}` (expected baseline|sap|tap|dual-det|se|cbam|vdan)")))
    }
}

impl TryFrom<String> for VariantKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<VariantKind> for String {
    fn from(k: VariantKind) -> Self {
        k.as_str().to_owned()
    }
}

/// Plain perceptron stack `N → H → M → H → N` with a sigmoid output: the
/// variational path without sampling or a log-variance head.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicPath {
    pub input_len: usize,
    pub encoder: Linear,
    pub bottleneck: Linear,
    pub decoder: Linear,
    pub decoder_out: Linear,
}

impl DeterministicPath {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input_len: usize, hidden: usize, ratio: usize) -> Self {
        let m = latent_dim(input_len, ratio);
        Self {
            input_len,
            encoder: Linear::new(store, rng, &format!("{name}.encoder"), input_len, hidden),
            bottleneck: Linear::new(store, rng, &format!("{name}.bottleneck"), hidden, m),
            decoder: Linear::new(store, rng, &format!("{name}.decoder"), m, hidden),
            decoder_out: Linear::new(store, rng, &format!("{name}.decoder_out"), hidden, input_len),
        }
    }

    pub fn param_count(input_len: usize, hidden: usize, ratio: usize) -> usize {
        let m = latent_dim(input_len, ratio);
        Linear::param_count(input_len, hidden)
            + Linear::param_count(hidden, m)
            + Linear::param_count(m, hidden)
            + Linear::param_count(hidden, input_len)
    }
}

/// `sigmoid(MLP(d))` through a [`DeterministicPath`].
pub fn deterministic_weights(s: &mut Session, store: &ParamStore, path: &DeterministicPath, d: Var) -> Result<Var> {
    if s.tape().shape(d) != [path.input_len] {
        return Err(Error::InvalidInput(format!(
            "descriptor of shape {:?} for a path of length {}",
            s.tape().shape(d),
            path.input_len
        )));
    }
    let h = path.encoder.forward(s, store, d)?;
    let h = s.tape().relu(h)?;
    let z = path.bottleneck.forward(s, store, h)?;
    let h = path.decoder.forward(s, store, z)?;
    let h = s.tape().relu(h)?;
    let logits = path.decoder_out.forward(s, store, h)?;
    Ok(s.tape().sigmoid(logits)?)
}

/// Two-layer bottleneck `N → H → N` used by the attention baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl Bottleneck {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, n: usize, hidden: usize) -> Self {
        Self {
            squeeze: Linear::new(store, rng, &format!("{name}.squeeze"), n, hidden),
            excite: Linear::new(store, rng, &format!("{name}.excite"), hidden, n),
        }
    }

    /// Pre-sigmoid scores.
    fn forward(&self, s: &mut Session, store: &ParamStore, d: Var) -> Result<Var> {
        let h = self.squeeze.forward(s, store, d)?;
        let h = s.tape().relu(h)?;
        self.excite.forward(s, store, h)
    }
}

/// Temporal attention of the CBAM-style baseline: a depthwise conv over the
/// stacked mean and max time profiles, then a 2 → 1 pointwise conv.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConvAttention {
    pub depthwise_weight: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise_weight: ParamId,
    pub pointwise_bias: ParamId,
}

impl TemporalConvAttention {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str) -> Self {
        let limit = (3.0 / CBAM_KERNEL as f64).sqrt();
        Self {
            depthwise_weight: store.add(format!("{name}.depthwise.weight"), uniform(rng, &[2, CBAM_KERNEL], limit)),
            depthwise_bias: store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[2])),
            pointwise_weight: store.add(format!("{name}.pointwise.weight"), uniform(rng, &[1, 2], 1.0)),
            pointwise_bias: store.add(format!("{name}.pointwise.bias"), Tensor::zeros(&[1])),
        }
    }

    fn forward(&self, s: &mut Session, store: &ParamStore, x: Var) -> Result<Var> {
        let frames = s.tape().shape(x)[1];
        let dw = s.param(store, self.depthwise_weight);
        let db = s.param(store, self.depthwise_bias);
        let pw = s.param(store, self.pointwise_weight);
        let pb = s.param(store, self.pointwise_bias);
        let tape = s.tape();
        let mean = tape.reduce_mean(x, &[0, 2, 3])?;
        let max = tape.reduce_max(x, &[0, 2, 3])?;
        let mean = tape.reshape(mean, &[1, frames])?;
        let max = tape.reshape(max, &[1, frames])?;
        let stacked = tape.concat(&[mean, max], 0)?;
        let h = tape.depthwise_conv1d(stacked, dw, db)?;
        let h = tape.pointwise_conv1d(h, pw, pb)?;
        let h = tape.reshape(h, &[frames])?;
        Ok(tape.sigmoid(h)?)
    }
}

/// The attention stage of each variant, up to and including the encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Attention {
    Baseline,
    SapOnly { path: VariationalPath, alpha: ParamId },
    TapOnly { path: VariationalPath, beta: ParamId, project_weight: ParamId, project_bias: ParamId },
    DualDet { subcarrier: DeterministicPath, temporal: DeterministicPath, alpha: ParamId, beta: ParamId },
    SeStyle { mlp: Bottleneck, alpha: ParamId },
    CbamStyle { mlp: Bottleneck, temporal: TemporalConvAttention, alpha: ParamId },
    FullVdan(Vdan),
}

/// Encoder features plus whatever the variant exposes for the loss and
/// diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub features: Var,
    pub kl_c: Option<Var>,
    pub kl_t: Option<Var>,
    pub w_c: Option<Var>,
    pub w_t: Option<Var>,
}

impl Attention {
    pub fn new(kind: VariantKind, cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let a = &cfg.arch;
        let (c, t) = (cfg.shape.subcarriers, cfg.shape.frames);
        let scalar = |store: &mut ParamStore, name: &str| store.add(name, Tensor::scalar(a.fusion_init));
        match kind {
            VariantKind::Baseline => Attention::Baseline,
            VariantKind::SapOnly => Attention::SapOnly {
                path: VariationalPath::new(store, rng, "sap.path", PathAxis::Subcarrier, c, a.hidden_subcarrier, a.ratio_subcarrier),
                alpha: scalar(store, "sap.alpha"),
            },
            VariantKind::TapOnly => {
                let d = a.feature_dim;
                Attention::TapOnly {
                    path: VariationalPath::new(store, rng, "tap.path", PathAxis::Time, t, a.hidden_time, a.ratio_time),
                    beta: scalar(store, "tap.beta"),
                    project_weight: store.add("tap.project.weight", uniform(rng, &[d, d], (6.0 / d as f64).sqrt())),
                    project_bias: store.add("tap.project.bias", Tensor::zeros(&[d])),
                }
            }
            VariantKind::DualDet => Attention::DualDet {
                subcarrier: DeterministicPath::new(store, rng, "dual_det.subcarrier", c, a.hidden_subcarrier, a.ratio_subcarrier),
                temporal: DeterministicPath::new(store, rng, "dual_det.temporal", t, a.hidden_time, a.ratio_time),
                alpha: scalar(store, "dual_det.alpha"),
                beta: scalar(store, "dual_det.beta"),
            },
            VariantKind::SeStyle => Attention::SeStyle {
                mlp: Bottleneck::new(store, rng, "se.mlp", c, a.se_hidden),
                alpha: scalar(store, "se.alpha"),
            },
            VariantKind::CbamStyle => Attention::CbamStyle {
                mlp: Bottleneck::new(store, rng, "cbam.mlp", c, a.cbam_hidden),
                temporal: TemporalConvAttention::new(store, rng, "cbam.temporal"),
                alpha: scalar(store, "cbam.alpha"),
            },
            VariantKind::FullVdan => Attention::FullVdan(Vdan::new(store, rng, cfg)),
        }
    }

    pub fn forward(
        &self,
        s: &mut Session,
        store: &ParamStore,
        encoder: &FeatureEncoder,
        x: Var,
        mode: Mode,
    ) -> Result<AttentionOutput> {
        let plain = |features| AttentionOutput { features, kl_c: None, kl_t: None, w_c: None, w_t: None };
        match self {
            Attention::Baseline => Ok(plain(encoder.encode(s, store, x)?)),
            Attention::SapOnly { path, alpha } => {
                let d = subcarrier_descriptor(s.tape(), x)?;
                let (w, post) = variational_weights(s, store, path, d, mode)?;
                let kl = kl_divergence(s.tape(), post)?;
                let fused = residual(s, store, x, w, PathAxis::Subcarrier, *alpha)?;
                let h = encoder.encode(s, store, fused)?;
                let tape = s.tape();
                let (dim, len) = (tape.shape(h)[0], tape.shape(h)[1]);
                let pairs = tape.reshape(h, &[dim, len / 2, 2])?;
                let features = tape.reduce_mean(pairs, &[2])?;
                Ok(AttentionOutput { features, kl_c: Some(kl), kl_t: None, w_c: Some(w), w_t: None })
            }
            Attention::TapOnly { path, beta, project_weight, project_bias } => {
                let d = time_descriptor(s.tape(), x)?;
                let (w, post) = variational_weights(s, store, path, d, mode)?;
                let kl = kl_divergence(s.tape(), post)?;
                let fused = residual(s, store, x, w, PathAxis::Time, *beta)?;
                let h = encoder.encode(s, store, fused)?;
                let pw = s.param(store, *project_weight);
                let pb = s.param(store, *project_bias);
                let features = s.tape().pointwise_conv1d(h, pw, pb)?;
                Ok(AttentionOutput { features, kl_c: None, kl_t: Some(kl), w_c: None, w_t: Some(w) })
            }
            Attention::DualDet { subcarrier, temporal, alpha, beta } => {
                let d_c = subcarrier_descriptor(s.tape(), x)?;
                let d_t = time_descriptor(s.tape(), x)?;
                let w_c = deterministic_weights(s, store, subcarrier, d_c)?;
                let w_t = deterministic_weights(s, store, temporal, d_t)?;
                let x_c = recalibrate(s.tape(), x, w_c, PathAxis::Subcarrier)?;
                let x_t = recalibrate(s.tape(), x, w_t, PathAxis::Time)?;
                let a = s.param(store, *alpha);
                let b = s.param(store, *beta);
                let fused = crate::vdan::fuse(s.tape(), x, x_c, x_t, a, b)?;
                let features = encoder.encode(s, store, fused)?;
                Ok(AttentionOutput { features, kl_c: None, kl_t: None, w_c: Some(w_c), w_t: Some(w_t) })
            }
            Attention::SeStyle { mlp, alpha } => {
                let d = subcarrier_descriptor(s.tape(), x)?;
                let scores = mlp.forward(s, store, d)?;
                let w = s.tape().sigmoid(scores)?;
                let fused = residual(s, store, x, w, PathAxis::Subcarrier, *alpha)?;
                let features = encoder.encode(s, store, fused)?;
                Ok(AttentionOutput { w_c: Some(w), ..plain(features) })
            }
            Attention::CbamStyle { mlp, temporal, alpha } => {
                let mean = subcarrier_descriptor(s.tape(), x)?;
                let max = s.tape().reduce_max(x, &[1, 2, 3])?;
                let from_mean = mlp.forward(s, store, mean)?;
                let from_max = mlp.forward(s, store, max)?;
                let scores = s.tape().add(from_mean, from_max)?;
                let w_c = s.tape().sigmoid(scores)?;
                let refined = recalibrate(s.tape(), x, w_c, PathAxis::Subcarrier)?;
                let w_t = temporal.forward(s, store, refined)?;
                let refined = recalibrate(s.tape(), refined, w_t, PathAxis::Time)?;
                let a = s.param(store, *alpha);
                let scaled = s.tape().scale(refined, a)?;
                let fused = s.tape().add(x, scaled)?;
                let features = encoder.encode(s, store, fused)?;
                Ok(AttentionOutput { w_c: Some(w_c), w_t: Some(w_t), ..plain(features) })
            }
            Attention::FullVdan(vdan) => {
                let out = vdan.forward(s, store, encoder, x, mode)?;
                Ok(AttentionOutput {
                    features: out.features,
                    kl_c: Some(out.kl_c),
                    kl_t: Some(out.kl_t),
                    w_c: Some(out.w_c),
                    w_t: Some(out.w_t),
                })
            }
        }
    }
}

/// `x + scale·recalibrate(x, w)` for single-path variants.
fn residual(s: &mut Session, store: &ParamStore, x: Var, w: Var, axis: PathAxis, scale: ParamId) -> Result<Var> {
    let refined = recalibrate(s.tape(), x, w, axis)?;
    let k = s.param(store, scale);
    let scaled = s.tape().scale(refined, k)?;
    Ok(s.tape().add(x, scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, InputShape, Model};
    use crate::seed::rng_from;
    use crate::synth::{generate_sample, SynthConfig};
    use crate::tape::Tape;
    use crate::vdan::Noise;

    fn default_model(kind: VariantKind) -> Model {
        let shape = InputShape { subcarriers: 30, frames: 100, streams: 3, classes: 5 };
        let cfg = ModelConfig::new(shape, ArchConfig::default()).unwrap();
        Model::new(kind, &cfg, 2).unwrap()
    }

    #[test]
    fn names_and_codes_round_trip() {
        for kind in VariantKind::ALL {
            assert_eq!(kind.as_str().parse::<VariantKind>().unwrap(), kind);
            assert_eq!(VariantKind::from_code(kind.code()), Some(kind));
            assert_eq!(serde_json::to_value(kind).unwrap(), kind.as_str());
        }
        assert!("resnet".parse::<VariantKind>().is_err());
        assert_eq!(VariantKind::from_code(7), None);
    }

    #[test]
    fn every_variant_yields_the_shared_feature_shape() {
        let sample = generate_sample(&SynthConfig::default(), 0, 3).unwrap();
        for kind in VariantKind::ALL {
            let model = default_model(kind);
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &model.store);
            let out = model.forward(&mut s, &sample.data, Mode::Train(Noise::Seeded(1))).unwrap();
            let tape = s.tape();
            assert_eq!(tape.shape(out.features), [64, 25], "{kind}");
            assert_eq!(tape.shape(out.logits), [5], "{kind}");
            let variational = matches!(kind, VariantKind::SapOnly | VariantKind::TapOnly | VariantKind::FullVdan);
            assert_eq!(out.kl_c.is_some() || out.kl_t.is_some(), variational, "{kind}");
        }
    }

    #[test]
    fn full_variant_delegates_to_the_dual_path_module() {
        let model = default_model(VariantKind::FullVdan);
        let Attention::FullVdan(vdan) = &model.attention else { panic!("wrong attention") };
        let sample = generate_sample(&SynthConfig::default(), 4, 8).unwrap();
        let mode = Mode::Train(Noise::Seeded(9));
        let run = |direct: bool| {
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &model.store);
            let x = s.tape().constant(sample.data.clone());
            let features = if direct {
                vdan.forward(&mut s, &model.store, &model.encoder, x, mode).unwrap().features
            } else {
                model.attention.forward(&mut s, &model.store, &model.encoder, x, mode).unwrap().features
            };
            s.tape().value(features).clone()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn zero_residual_scale_reduces_to_plain_encoding() {
        let shape = InputShape { subcarriers: 6, frames: 16, streams: 2, classes: 3 };
        let arch = ArchConfig { feature_dim: 4, feature_len: 4, fusion_init: 0.0, ..ArchConfig::default() };
        let cfg = ModelConfig::new(shape, arch).unwrap();
        let x = uniform(&mut rng_from(1, 2, 3), &[6, 16, 2, 2], 1.0);
        for kind in [VariantKind::DualDet, VariantKind::FullVdan, VariantKind::SeStyle, VariantKind::CbamStyle] {
            let model = Model::new(kind, &cfg, 0).unwrap();
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &model.store);
            let out = model.forward(&mut s, &x, Mode::Infer).unwrap();
            let xv = s.tape().constant(x.clone());
            let plain = model.encoder.encode(&mut s, &model.store, xv).unwrap();
            let tape = s.tape();
            assert_eq!(tape.value(out.features), tape.value(plain), "{kind}");
        }
    }

    #[test]
    fn sap_pools_frame_pairs() {
        let shape = InputShape { subcarriers: 6, frames: 16, streams: 2, classes: 3 };
        let arch = ArchConfig { feature_dim: 4, feature_len: 4, fusion_init: 0.0, ..ArchConfig::default() };
        let cfg = ModelConfig::new(shape, arch).unwrap();
        let model = Model::new(VariantKind::SapOnly, &cfg, 0).unwrap();
        let x = uniform(&mut rng_from(4, 4, 4), &[6, 16, 2, 2], 1.0);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &model.store);
        let out = model.forward(&mut s, &x, Mode::Infer).unwrap();
        let xv = s.tape().constant(x.clone());
        let h = model.encoder.encode(&mut s, &model.store, xv).unwrap();
        let tape = s.tape();
        assert_eq!(tape.shape(h), [4, 8]);
        let (h, f) = (tape.value(h).data(), tape.value(out.features).data());
        for d in 0..4 {
            for j in 0..4 {
                let expect = 0.5 * (h[d * 8 + 2 * j] + h[d * 8 + 2 * j + 1]);
                assert!((f[d * 4 + j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn extra_parameter_counts() {
        let (c, t) = (30, 100);
        let a = ArchConfig::default();
        let sap = VariationalPath::param_count(c, a.hidden_subcarrier, a.ratio_subcarrier) + 1;
        let tap = VariationalPath::param_count(t, a.hidden_time, a.ratio_time) + 1 + 64 * 64 + 64;
        let full = sap + VariationalPath::param_count(t, a.hidden_time, a.ratio_time) + 1;
        let dual = DeterministicPath::param_count(c, a.hidden_subcarrier, a.ratio_subcarrier)
            + DeterministicPath::param_count(t, a.hidden_time, a.ratio_time)
            + 2;
        let extra = |k| default_model(k).extra_params();
        assert_eq!(extra(VariantKind::Baseline), 0);
        assert_eq!(extra(VariantKind::SapOnly), sap);
        assert_eq!(extra(VariantKind::TapOnly), tap);
        assert_eq!(extra(VariantKind::FullVdan), full);
        assert_eq!(extra(VariantKind::DualDet), dual);
        assert!(dual < full);
        // Attention baselines sit within 30% of their reference budgets.
        let near = |n: usize, target: f64| (n as f64 - target).abs() <= 0.3 * target;
        assert!(near(extra(VariantKind::SeStyle), 35_100.0));
        assert!(near(extra(VariantKind::CbamStyle), 39_300.0));
    }

    #[test]
    fn deterministic_weights_check_length_and_range() {
        let mut store = ParamStore::new();
        let path = DeterministicPath::new(&mut store, &mut rng_from(0, 0, 0), "d", 10, 8, 5);
        assert_eq!(store.count(), DeterministicPath::param_count(10, 8, 5));
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let d = s.tape().constant(Tensor::vector(&[0.5; 10]));
        let w = deterministic_weights(&mut s, &store, &path, d).unwrap();
        assert!(s.tape().value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let short = s.tape().constant(Tensor::vector(&[0.5; 9]));
        assert!(deterministic_weights(&mut s, &store, &path, short).is_err());
    }
}
