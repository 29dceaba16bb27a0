//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result, TensorError};
use crate::model::{ArchConfig, InputShape, Model, ModelConfig};
use crate::nn::Session;
use crate::synth::{generate_sample, SynthConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::total_loss;
use crate::variants::VariantKind;
use crate::vdan::{Mode, Noise};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Maximum over all parameter entries of
    /// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Compares reverse-mode gradients of a scalar loss against central
/// differences with the given `step`.
///
/// `loss_fn` receives a fresh tape and one trainable leaf per entry of
/// `params`, and must be deterministic: any sampling noise has to be frozen
/// (for example through a fixed seed).
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {step}")));
    }
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" }.into());
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" }.into());
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var, params[pi].len());
        for k in 0..params[pi].len() {
            let original = params[pi].data()[k];
            work[pi].data_mut()[k] = original + step;
            let plus = evaluate(&work)?;
            work[pi].data_mut()[k] = original - step;
            let minus = evaluate(&work)?;
            work[pi].data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Small generator settings matching [`tiny_model_config`].
pub fn tiny_synth_config() -> SynthConfig {
    SynthConfig {
        subcarriers: 8,
        frames: 16,
        streams: 2,
        classes: 3,
        doppler: vec![1.5, 3.5, 5.5],
        ..SynthConfig::default()
    }
}

/// A model small enough to finite-difference every parameter: C=8, T=16,
/// S=2, D=8, T′=4, K=3 and hidden width 4 throughout.
pub fn tiny_model_config() -> ModelConfig {
    let shape = InputShape { subcarriers: 8, frames: 16, streams: 2, classes: 3 };
    let arch = ArchConfig {
        feature_dim: 8,
        feature_len: 4,
        hidden_subcarrier: 4,
        hidden_time: 4,
        lstm_hidden: 4,
        se_hidden: 4,
        cbam_hidden: 4,
        ..ArchConfig::default()
    };
    ModelConfig::new(shape, arch).expect("tiny config is valid")
}

/// Checks the gradient of the full training loss (cross-entropy plus
/// weighted KL terms) with respect to every parameter of `model`, with the
/// latent noise frozen by `eps_seed`.
pub fn model_grad_check(
    model: &Model,
    x: &Tensor,
    label: usize,
    eps_seed: u64,
    lambda: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let loss_fn = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut s = Session::with_vars(tape, vars);
        let out = model.forward(&mut s, x, Mode::Train(Noise::Seeded(eps_seed)))?;
        total_loss(s.tape(), out.logits, label, out.kl_c, out.kl_t, lambda)
    };
    grad_check(loss_fn, model.store.values(), step)
}

/// Finite-difference report for every variant on the tiny configuration.
pub fn variant_suite(seed: u64, step: f64) -> Result<Vec<(VariantKind, GradCheckReport)>> {
    let synth = tiny_synth_config();
    let sample = generate_sample(&synth, 1, seed)?;
    VariantKind::ALL
        .iter()
        .map(|&kind| {
            let model = Model::new(kind, &tiny_model_config(), seed)?;
            let report = model_grad_check(&model, &sample.data, sample.label, seed, 0.05, step)?;
            Ok((kind, report))
        })
        .collect()
}
