//! Dual-path variational attention, fusion and the convolutional feature
//! encoder.
//!
//! Each path pools the input into a descriptor, encodes it into a diagonal
//! Gaussian posterior, decodes a latent draw into sigmoid weights and
//! rescales the input along its axis. The two rescaled tensors are added
//! back onto the input with trainable scalars before encoding.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result, TensorError};
use crate::model::{ModelConfig, CONV_KERNEL, ENCODER_PREFIX};
use crate::nn::{uniform, Linear, ParamId, ParamStore, Session};
use crate::seed::{rng_from, TAG_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How latent codes are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Posterior mean; consumes no randomness.
    Infer,
    /// Reparameterised draw `z = μ + σ·ε`.
    Train(Noise),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    /// `ε ~ N(0, I)` from a seeded stream (one stream per path).
    Seeded(u64),
    /// `ε = 0`.
    Zero,
}

/// Axis a path attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathAxis {
    Subcarrier,
    Time,
}

impl PathAxis {
    /// Position of the axis in a `[C, T, S, 2]` tensor.
    pub fn index(self) -> usize {
        match self {
            PathAxis::Subcarrier => 0,
            PathAxis::Time => 1,
        }
    }

    fn eps_stream(self) -> u64 {
        self.index() as u64
    }
}

fn check_sample(tape: &Tape, x: Var, op: &'static str) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[3] != 2 {
        return Err(TensorError::shape(op, format!("expected [C, T, S, 2], got {shape:?}")).into());
    }
    Ok(())
}

/// Mean over time, streams and real/imag for each subcarrier.
pub fn subcarrier_descriptor(tape: &mut Tape, x: Var) -> Result<Var> {
    check_sample(tape, x, "subcarrier_descriptor")?;
    Ok(tape.reduce_mean(x, &[1, 2, 3])?)
}

/// Mean over subcarriers, streams and real/imag for each frame.
pub fn time_descriptor(tape: &mut Tape, x: Var) -> Result<Var> {
    check_sample(tape, x, "time_descriptor")?;
    Ok(tape.reduce_mean(x, &[0, 2, 3])?)
}

pub fn descriptor(tape: &mut Tape, x: Var, axis: PathAxis) -> Result<Var> {
    match axis {
        PathAxis::Subcarrier => subcarrier_descriptor(tape, x),
        PathAxis::Time => time_descriptor(tape, x),
    }
}

/// Latent width for a descriptor of length `n` and compression ratio `r`.
pub fn latent_dim(n: usize, ratio: usize) -> usize {
    (n / ratio).max(1)
}

/// Encoder/decoder pair of one variational attention path.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPath {
    pub axis: PathAxis,
    pub input_len: usize,
    pub hidden: usize,
    pub latent: usize,
    pub encoder: Linear,
    pub mu_head: Linear,
    pub log_var_head: Linear,
    pub decoder: Linear,
    pub decoder_out: Linear,
}

impl VariationalPath {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        axis: PathAxis,
        input_len: usize,
        hidden: usize,
        ratio: usize,
    ) -> Self {
        let latent = latent_dim(input_len, ratio);
        Self {
            axis,
            input_len,
            hidden,
            latent,
            encoder: Linear::new(store, rng, &format!("{name}.encoder"), input_len, hidden),
            mu_head: Linear::new(store, rng, &format!("{name}.mu"), hidden, latent),
            log_var_head: Linear::new(store, rng, &format!("{name}.log_var"), hidden, latent),
            decoder: Linear::new(store, rng, &format!("{name}.decoder"), latent, hidden),
            decoder_out: Linear::new(store, rng, &format!("{name}.decoder_out"), hidden, input_len),
        }
    }

    pub fn param_count(input_len: usize, hidden: usize, ratio: usize) -> usize {
        let m = latent_dim(input_len, ratio);
        Linear::param_count(input_len, hidden)
            + 2 * Linear::param_count(hidden, m)
            + Linear::param_count(m, hidden)
            + Linear::param_count(hidden, input_len)
    }
}

/// Posterior of one path on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posterior {
    pub mu: Var,
    pub log_var: Var,
}

/// Encodes `d`, draws or takes the mean latent, and decodes sigmoid weights.
pub fn variational_weights(
    s: &mut Session,
    store: &ParamStore,
    path: &VariationalPath,
    d: Var,
    mode: Mode,
) -> Result<(Var, Posterior)> {
    if s.tape().shape(d) != [path.input_len] {
        return Err(Error::InvalidInput(format!(
            "descriptor of shape {:?} for a path of length {}",
            s.tape().shape(d),
            path.input_len
        )));
    }
    if !s.tape().value(d).all_finite() {
        return Err(TensorError::NonFinite { op: "variational_weights" }.into());
    }
    let h = path.encoder.forward(s, store, d)?;
    let h = s.tape().relu(h)?;
    let mu = path.mu_head.forward(s, store, h)?;
    let log_var = path.log_var_head.forward(s, store, h)?;
    let z = match mode {
        Mode::Infer => mu,
        Mode::Train(noise) => {
            let eps = match noise {
                Noise::Zero => Tensor::zeros(&[path.latent]),
                Noise::Seeded(seed) => {
                    let mut rng = rng_from(seed, TAG_EPS, path.axis.eps_stream());
                    let draws: Vec<f64> = (0..path.latent).map(|_| StandardNormal.sample(&mut rng)).collect();
                    Tensor::vector(&draws)
                }
            };
            let tape = s.tape();
            let eps = tape.constant(eps);
            let half = tape.scale_const(log_var, 0.5)?;
            let sigma = tape.exp(half)?;
            let spread = tape.mul(sigma, eps)?;
            tape.add(mu, spread)?
        }
    };
    let h = path.decoder.forward(s, store, z)?;
    let h = s.tape().relu(h)?;
    let logits = path.decoder_out.forward(s, store, h)?;
    let w = s.tape().sigmoid(logits)?;
    Ok((w, Posterior { mu, log_var }))
}

/// `½ Σ (μ² + e^{log σ²} − 1 − log σ²)` on the tape.
pub fn kl_divergence(tape: &mut Tape, posterior: Posterior) -> Result<Var> {
    let Posterior { mu, log_var } = posterior;
    if tape.shape(mu) != tape.shape(log_var) {
        return Err(TensorError::shape("kl_divergence", "mean and log-variance differ in shape").into());
    }
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(log_var)?;
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, log_var)?;
    let t = tape.add_const(t, -1.0)?;
    let total = tape.sum(t)?;
    Ok(tape.scale_const(total, 0.5)?)
}

/// Closed-form KL of `N(μ, diag(e^{log σ²}))` from `N(0, I)`.
pub fn kl_closed_form(mu: &[f64], log_var: &[f64]) -> Result<f64> {
    if mu.len() != log_var.len() {
        return Err(Error::InvalidInput("mean and log-variance lengths differ".into()));
    }
    if mu.iter().chain(log_var).any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "kl_closed_form" }.into());
    }
    Ok(0.5 * mu.iter().zip(log_var).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>())
}

/// Multiplies `x` by `w` broadcast along `axis`.
pub fn recalibrate(tape: &mut Tape, x: Var, w: Var, axis: PathAxis) -> Result<Var> {
    Ok(tape.mul_along_axis(x, w, axis.index())?)
}

/// `x + α·x_c + β·x_t`.
pub fn fuse(tape: &mut Tape, x: Var, x_c: Var, x_t: Var, alpha: Var, beta: Var) -> Result<Var> {
    let a = tape.scale(x_c, alpha)?;
    let b = tape.scale(x_t, beta)?;
    let sum = tape.add(x, a)?;
    Ok(tape.add(sum, b)?)
}

/// Depthwise conv, temporal subsampling, pointwise conv and ReLU.
///
/// Subsampling the depthwise output before the pointwise conv gives the
/// same result as subsampling at the end, since the pointwise conv and the
/// ReLU act on each frame separately.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub depthwise_weight: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise_weight: ParamId,
    pub pointwise_bias: ParamId,
    pub stride: usize,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        let dw_limit = (3.0 / CONV_KERNEL as f64).sqrt();
        let pw_limit = (6.0 / c_in as f64).sqrt();
        Self {
            depthwise_weight: store.add(format!("{name}.depthwise.weight"), uniform(rng, &[c_in, CONV_KERNEL], dw_limit)),
            depthwise_bias: store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[c_in])),
            pointwise_weight: store.add(format!("{name}.pointwise.weight"), uniform(rng, &[c_out, c_in], pw_limit)),
            pointwise_bias: store.add(format!("{name}.pointwise.bias"), Tensor::zeros(&[c_out])),
            stride,
        }
    }

    /// Parameters of a depthwise-separable block.
    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_in * kernel + c_in + c_out * c_in + c_out
    }

    /// Parameters of a full convolution with the same channels and kernel.
    pub fn full_conv_param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * kernel + c_out
    }

    pub fn forward(&self, s: &mut Session, store: &ParamStore, x: Var) -> Result<Var> {
        let dw = s.param(store, self.depthwise_weight);
        let db = s.param(store, self.depthwise_bias);
        let pw = s.param(store, self.pointwise_weight);
        let pb = s.param(store, self.pointwise_bias);
        let tape = s.tape();
        let h = tape.depthwise_conv1d(x, dw, db)?;
        let h = if self.stride > 1 { tape.downsample(h, self.stride)? } else { h };
        let h = tape.pointwise_conv1d(h, pw, pb)?;
        Ok(tape.relu(h)?)
    }
}

/// Two depthwise-separable blocks mapping `[C, T, S, 2]` to `[D, T / Πstrides]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    pub blocks: Vec<ConvBlock>,
}

impl FeatureEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, width: usize, strides: [usize; 2]) -> Self {
        let blocks = strides
            .iter()
            .enumerate()
            .map(|(i, &stride)| {
                let c_in = if i == 0 { channels } else { width };
                ConvBlock::new(store, rng, &format!("{ENCODER_PREFIX}block{i}"), c_in, width, stride)
            })
            .collect();
        Self { blocks }
    }

    pub fn encode(&self, s: &mut Session, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = s.tape().shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::shape("encode", format!("expected [C, T, S, 2], got {shape:?}")).into());
        }
        let (c, t, st, ri) = (shape[0], shape[1], shape[2], shape[3]);
        let seq = s.tape().permute(x, &[0, 2, 3, 1])?;
        let mut h = s.tape().reshape(seq, &[c * st * ri, t])?;
        for block in &self.blocks {
            h = block.forward(s, store, h)?;
        }
        Ok(h)
    }
}

/// Both variational paths and the fusion scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Vdan {
    pub subcarrier: VariationalPath,
    pub temporal: VariationalPath,
    pub alpha: ParamId,
    pub beta: ParamId,
}

/// Everything a forward pass exposes for losses and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct VdanOutput {
    pub features: Var,
    pub kl_c: Var,
    pub kl_t: Var,
    pub w_c: Var,
    pub w_t: Var,
}

impl Vdan {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let a = &cfg.arch;
        Self {
            subcarrier: VariationalPath::new(
                store,
                rng,
                "vdan.subcarrier",
                PathAxis::Subcarrier,
                cfg.shape.subcarriers,
                a.hidden_subcarrier,
                a.ratio_subcarrier,
            ),
            temporal: VariationalPath::new(
                store,
                rng,
                "vdan.temporal",
                PathAxis::Time,
                cfg.shape.frames,
                a.hidden_time,
                a.ratio_time,
            ),
            alpha: store.add("vdan.alpha", Tensor::scalar(a.fusion_init)),
            beta: store.add("vdan.beta", Tensor::scalar(a.fusion_init)),
        }
    }

    pub fn forward(
        &self,
        s: &mut Session,
        store: &ParamStore,
        encoder: &FeatureEncoder,
        x: Var,
        mode: Mode,
    ) -> Result<VdanOutput> {
        let d_c = subcarrier_descriptor(s.tape(), x)?;
        let d_t = time_descriptor(s.tape(), x)?;
        let (w_c, post_c) = variational_weights(s, store, &self.subcarrier, d_c, mode)?;
        let (w_t, post_t) = variational_weights(s, store, &self.temporal, d_t, mode)?;
        let kl_c = kl_divergence(s.tape(), post_c)?;
        let kl_t = kl_divergence(s.tape(), post_t)?;
        let x_c = recalibrate(s.tape(), x, w_c, PathAxis::Subcarrier)?;
        let x_t = recalibrate(s.tape(), x, w_t, PathAxis::Time)?;
        let alpha = s.param(store, self.alpha);
        let beta = s.param(store, self.beta);
        let fused = fuse(s.tape(), x, x_c, x_t, alpha, beta)?;
        let features = encoder.encode(s, store, fused)?;
        Ok(VdanOutput { features, kl_c, kl_t, w_c, w_t })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, InputShape};
    use crate::tensor::sigmoid;
    use rand::Rng;

    fn random_sample(seed: u64, c: usize, t: usize, st: usize) -> Tensor {
        let mut rng = rng_from(seed, 0, 0);
        let data = (0..c * t * st * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![c, t, st, 2], data).unwrap()
    }

    fn dense(store: &ParamStore, layer: &Linear, x: &[f64]) -> Vec<f64> {
        let w = store.get(layer.weight).data();
        let b = store.get(layer.bias).data();
        (0..layer.fan_out)
            .map(|o| b[o] + (0..layer.fan_in).map(|i| x[i] * w[i * layer.fan_out + o]).sum::<f64>())
            .collect()
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    fn small_path(store: &mut ParamStore, axis: PathAxis, len: usize) -> VariationalPath {
        let mut rng = rng_from(3, 1, 1);
        VariationalPath::new(store, &mut rng, "p", axis, len, 6, 3)
    }

    #[test]
    fn descriptors_match_loop_means() {
        let (c, t, st) = (4, 6, 3);
        let x = random_sample(1, c, t, st);
        let at = |ci: usize, ti: usize, si: usize, r: usize| x.data()[((ci * t + ti) * st + si) * 2 + r];
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let dc = subcarrier_descriptor(&mut tape, v).unwrap();
        let dt = time_descriptor(&mut tape, v).unwrap();
        for ci in 0..c {
            let mut acc = 0.0;
            for ti in 0..t {
                for si in 0..st {
                    acc += at(ci, ti, si, 0) + at(ci, ti, si, 1);
                }
            }
            assert!((tape.value(dc).data()[ci] - acc / (t * st * 2) as f64).abs() < 1e-14);
        }
        for ti in 0..t {
            let mut acc = 0.0;
            for ci in 0..c {
                for si in 0..st {
                    acc += at(ci, ti, si, 0) + at(ci, ti, si, 1);
                }
            }
            assert!((tape.value(dt).data()[ti] - acc / (c * st * 2) as f64).abs() < 1e-14);
        }
        let flat = tape.constant(Tensor::zeros(&[4, 6]));
        assert!(subcarrier_descriptor(&mut tape, flat).is_err());
    }

    #[test]
    fn inference_weights_match_a_plain_mlp() {
        let mut store = ParamStore::new();
        let path = small_path(&mut store, PathAxis::Time, 9);
        // Non-zero biases so every layer is exercised.
        for v in store.values_mut() {
            for (i, x) in v.data_mut().iter_mut().enumerate() {
                *x += 0.01 * (i % 5) as f64;
            }
        }
        let d: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let dv = s.tape().constant(Tensor::vector(&d));
        let (w, post) = variational_weights(&mut s, &store, &path, dv, Mode::Infer).unwrap();

        let h = relu(dense(&store, &path.encoder, &d));
        let mu = dense(&store, &path.mu_head, &h);
        let log_var = dense(&store, &path.log_var_head, &h);
        let h = relu(dense(&store, &path.decoder, &mu));
        let expect: Vec<f64> = dense(&store, &path.decoder_out, &h).into_iter().map(sigmoid).collect();
        let tape = s.tape();
        for (a, b) in tape.value(w).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in tape.value(post.log_var).data().iter().zip(&log_var) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn seeded_noise_is_repeatable_and_shifts_the_weights() {
        let mut store = ParamStore::new();
        let path = small_path(&mut store, PathAxis::Subcarrier, 12);
        let d = Tensor::vector(&(0..12).map(|i| 0.1 * i as f64 - 0.5).collect::<Vec<_>>());
        let run = |mode| {
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &store);
            let dv = s.tape().constant(d.clone());
            let (w, _) = variational_weights(&mut s, &store, &path, dv, mode).unwrap();
            s.tape().value(w).clone()
        };
        let a = run(Mode::Train(Noise::Seeded(5)));
        assert_eq!(a, run(Mode::Train(Noise::Seeded(5))));
        assert_ne!(a, run(Mode::Train(Noise::Seeded(6))));
        assert_ne!(a, run(Mode::Infer));
        assert_eq!(run(Mode::Train(Noise::Zero)), run(Mode::Infer));
    }

    #[test]
    fn descriptor_checks() {
        let mut store = ParamStore::new();
        let path = small_path(&mut store, PathAxis::Subcarrier, 6);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let short = s.tape().constant(Tensor::vector(&[0.0; 5]));
        assert!(variational_weights(&mut s, &store, &path, short, Mode::Infer).is_err());
        let bad = s.tape().constant(Tensor::vector(&[0.0, 1.0, f64::NAN, 0.0, 0.0, 0.0]));
        assert!(variational_weights(&mut s, &store, &path, bad, Mode::Infer).is_err());
    }

    #[test]
    fn kl_on_the_tape_matches_closed_form_and_its_gradient() {
        let mu = [0.3, -1.2, 0.0, 2.0];
        let log_var = [-0.5, 0.4, 0.0, -2.0];
        let mut tape = Tape::new();
        let m = tape.param(Tensor::vector(&mu));
        let lv = tape.param(Tensor::vector(&log_var));
        let kl = kl_divergence(&mut tape, Posterior { mu: m, log_var: lv }).unwrap();
        let exact = kl_closed_form(&mu, &log_var).unwrap();
        assert!((tape.value(kl).item() - exact).abs() < 1e-14);
        let grads = tape.backward(kl).unwrap();
        let gm = grads.get_or_zeros(m, 4);
        let glv = grads.get_or_zeros(lv, 4);
        for i in 0..4 {
            assert!((gm[i] - mu[i]).abs() < 1e-14);
            assert!((glv[i] - 0.5 * (log_var[i].exp() - 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn kl_matches_a_monte_carlo_estimate() {
        let mu = [0.8f64, -0.3, 0.1];
        let log_var = [-0.7f64, 0.5, 0.0];
        let mut rng = rng_from(11, 0, 0);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for (m, lv) in mu.iter().zip(&log_var) {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = m + (0.5 * lv).exp() * e;
                acc += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
            }
        }
        let exact = kl_closed_form(&mu, &log_var).unwrap();
        assert!(((acc / n as f64) - exact).abs() / exact < 0.02);
        assert!(kl_closed_form(&[1.0], &[0.0, 0.0]).is_err());
        assert!(kl_closed_form(&[f64::INFINITY], &[0.0]).is_err());
    }

    #[test]
    fn recalibration_and_fusion_match_loops() {
        let (c, t, st) = (3, 5, 2);
        let x = random_sample(2, c, t, st);
        let wc: Vec<f64> = (0..c).map(|i| 0.2 + 0.3 * i as f64).collect();
        let wt: Vec<f64> = (0..t).map(|i| 0.9 - 0.1 * i as f64).collect();
        let (alpha, beta) = (0.4, -0.25);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wcv = tape.constant(Tensor::vector(&wc));
        let wtv = tape.constant(Tensor::vector(&wt));
        let xc = recalibrate(&mut tape, xv, wcv, PathAxis::Subcarrier).unwrap();
        let xt = recalibrate(&mut tape, xv, wtv, PathAxis::Time).unwrap();
        let a = tape.constant(Tensor::scalar(alpha));
        let b = tape.constant(Tensor::scalar(beta));
        let fused = fuse(&mut tape, xv, xc, xt, a, b).unwrap();
        for ci in 0..c {
            for ti in 0..t {
                for k in 0..st * 2 {
                    let i = (ci * t + ti) * st * 2 + k;
                    let v = x.data()[i];
                    assert_eq!(tape.value(xc).data()[i], v * wc[ci]);
                    assert_eq!(tape.value(xt).data()[i], v * wt[ti]);
                    let expect = v + alpha * v * wc[ci] + beta * v * wt[ti];
                    assert!((tape.value(fused).data()[i] - expect).abs() < 1e-14);
                }
            }
        }
        let wrong = tape.constant(Tensor::vector(&[1.0; 4]));
        assert!(recalibrate(&mut tape, xv, wrong, PathAxis::Subcarrier).is_err());
    }

    #[test]
    fn param_counts_match_the_store() {
        let mut store = ParamStore::new();
        small_path(&mut store, PathAxis::Subcarrier, 30);
        assert_eq!(store.count(), VariationalPath::param_count(30, 6, 3));
        assert_eq!(latent_dim(30, 5), 6);
        assert_eq!(latent_dim(3, 10), 1);
        // A depthwise-separable block is much cheaper than a full conv.
        assert_eq!(ConvBlock::param_count(12, 64, 3), 12 * 3 + 12 + 64 * 12 + 64);
        assert!(ConvBlock::param_count(12, 64, 3) < ConvBlock::full_conv_param_count(12, 64, 3));
    }

    #[test]
    fn forward_shapes_and_weight_ranges() {
        let shape = InputShape { subcarriers: 10, frames: 20, streams: 2, classes: 3 };
        let arch = ArchConfig { feature_dim: 8, feature_len: 5, hidden_subcarrier: 6, hidden_time: 6, ..ArchConfig::default() };
        let cfg = ModelConfig::new(shape, arch).unwrap();
        let mut store = ParamStore::new();
        let mut rng = rng_from(0, 0, 0);
        let vdan = Vdan::new(&mut store, &mut rng, &cfg);
        let encoder = FeatureEncoder::new(&mut store, &mut rng, shape.encoder_channels(), 8, [2, 2]);
        assert_eq!(store.get(vdan.alpha).item(), 0.1);
        let x = random_sample(4, 10, 20, 2);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let xv = s.tape().constant(x);
        let out = vdan.forward(&mut s, &store, &encoder, xv, Mode::Train(Noise::Seeded(1))).unwrap();
        let tape = s.tape();
        assert_eq!(tape.shape(out.features), [8, 5]);
        assert_eq!(tape.shape(out.w_c), [10]);
        assert_eq!(tape.shape(out.w_t), [20]);
        assert!(tape.value(out.w_c).data().iter().chain(tape.value(out.w_t).data()).all(|&w| w > 0.0 && w < 1.0));
        assert!(tape.value(out.kl_c).item() >= 0.0 && tape.value(out.kl_t).item() >= 0.0);
        assert!(tape.value(out.features).data().iter().all(|&v| v >= 0.0));
    }
}
