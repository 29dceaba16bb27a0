//! Joint training of attention, encoder and classifier.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::model::Model;
use crate::nn::{ParamStore, Session};
use crate::seed::{derive_seed, rng_from, TAG_EPS, TAG_SHUFFLE, TAG_SPLIT};
use crate::synth::CsiSample;
use crate::tape::{Tape, Var};
use crate::vdan::{Mode, Noise};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the KL terms in the objective.
    pub lambda: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            base_lr: 1e-4,
            weight_decay: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            max_epochs: 150,
            patience: 20,
            train_fraction: 0.7,
            val_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("train.lambda", self.lambda),
            ("train.weight_decay", self.weight_decay),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be a non-negative number"));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        for (field, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        for (field, v) in [
            ("train.batch_size", self.batch_size),
            ("train.max_epochs", self.max_epochs),
            ("train.patience", self.patience),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        for (field, v) in [("train.train_fraction", self.train_fraction), ("train.val_fraction", self.val_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, "must lie in (0, 1)"));
            }
        }
        if self.train_fraction + self.val_fraction >= 1.0 {
            return Err(Error::config("train.val_fraction", "train and validation fractions must leave a test share"));
        }
        Ok(())
    }
}

/// Cross-entropy plus `λ·(kl_c + kl_t)`; absent KL terms count as zero.
pub fn total_loss(tape: &mut Tape, logits: Var, label: usize, kl_c: Option<Var>, kl_t: Option<Var>, lambda: f64) -> Result<Var> {
    let ce = tape.softmax_cross_entropy(logits, label)?;
    add_kl(tape, ce, kl_c, kl_t, lambda)
}

fn add_kl(tape: &mut Tape, ce: Var, kl_c: Option<Var>, kl_t: Option<Var>, lambda: f64) -> Result<Var> {
    let mut loss = ce;
    for kl in [kl_c, kl_t].into_iter().flatten() {
        let weighted = tape.scale_const(kl, lambda)?;
        loss = tape.add(loss, weighted)?;
    }
    Ok(loss)
}

/// Scalar form of [`total_loss`] from already computed components.
pub fn combine_loss(ce: f64, kl_c: f64, kl_t: f64, lambda: f64) -> f64 {
    ce + lambda * (kl_c + kl_t)
}

/// Cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidInput("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidInput(format!("step {step} beyond {total_steps}")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok((base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0))
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, steps: 0 }
    }

    /// Shrinks every parameter by `1 − lr·wd`, then applies the
    /// bias-corrected Adam update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.steps += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.steps);
        let c2 = 1.0 - cfg.beta2.powi(self.steps);
        let decay = 1.0 - lr * cfg.weight_decay;
        for (((param, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p *= decay;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Outcome of feeding one epoch's validation metric to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub kl_c: f64,
    pub kl_t: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "epoch,loss,ce,kl_c,kl_t,val_acc,lr")?;
        for r in &self.epochs {
            writeln!(out, "{},{},{},{},{},{},{}", r.epoch, r.loss, r.ce, r.kl_c, r.kl_t, r.val_acc, r.lr)?;
        }
        Ok(())
    }
}

/// Sample indices of a stratified split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles each class separately and cuts it by the configured fractions.
pub fn stratified_split(labels: &[usize], train_fraction: f64, val_fraction: f64, seed: u64) -> Split {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng_from(seed, TAG_SPLIT, class as u64));
        let n = members.len();
        let n_train = (train_fraction * n as f64).round() as usize;
        let n_val = ((val_fraction * n as f64).round() as usize).min(n - n_train);
        split.train.extend_from_slice(&members[..n_train]);
        split.val.extend_from_slice(&members[n_train..n_train + n_val]);
        split.test.extend_from_slice(&members[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Loss terms of one training forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub kl_c: f64,
    pub kl_t: f64,
}

/// Forward pass, loss and gradients for a single sample.
pub fn sample_gradients(model: &Model, sample: &CsiSample, mode: Mode, lambda: f64) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &model.store);
    let out = model.forward(&mut s, &sample.data, mode)?;
    let ce = s.tape().softmax_cross_entropy(out.logits, sample.label)?;
    let loss = add_kl(s.tape(), ce, out.kl_c, out.kl_t, lambda)?;
    let tape = s.tape();
    let read = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let terms = LossTerms {
        total: tape.value(loss).item(),
        ce: tape.value(ce).item(),
        kl_c: read(out.kl_c),
        kl_t: read(out.kl_t),
    };
    let grads = s.gradients(&model.store, loss)?;
    Ok((terms, grads))
}

/// Fraction of samples the model classifies correctly in inference mode.
pub fn accuracy(model: &Model, samples: &[CsiSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot score an empty sample set".into()));
    }
    let mut hits = 0;
    for s in samples {
        if model.predict(&s.data)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Trains `model` in place with mini-batch AdamW, cosine decay and early
/// stopping on validation accuracy; the best parameters are restored.
pub fn fit(model: &mut Model, train: &[CsiSample], val: &[CsiSample], cfg: &TrainConfig, seed: u64) -> Result<TrainHistory> {
    fit_with_metric(model, train, cfg, seed, |m| accuracy(m, val))
}

/// [`fit`] with a caller-supplied validation metric (higher is better).
pub fn fit_with_metric<F>(model: &mut Model, train: &[CsiSample], cfg: &TrainConfig, seed: u64, mut metric: F) -> Result<TrainHistory>
where
    F: FnMut(&Model) -> Result<f64>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let batches = train.len().div_ceil(cfg.batch_size);
    let total_steps = batches * cfg.max_epochs;
    let mut optimizer = AdamW::new(&model.store);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store = model.store.clone();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut draw = 0u64;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng_from(seed, TAG_SHUFFLE, epoch as u64));
        let mut sums = [0.0; 4];
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Vec<Vec<f64>> = model.store.values().iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let mode = Mode::Train(Noise::Seeded(derive_seed(seed, TAG_EPS, draw)));
                draw += 1;
                let (terms, grads) = sample_gradients(model, &train[i], mode, cfg.lambda).map_err(|e| match e {
                    Error::Tensor(TensorError::NonFinite { .. }) => Error::Diverged { epoch, step, loss: f64::NAN },
                    other => other,
                })?;
                if !terms.total.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: terms.total });
                }
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (a, g) in a.iter_mut().zip(g) {
                        *a += scale * g;
                    }
                }
                sums[0] += terms.total;
                sums[1] += terms.ce;
                sums[2] += terms.kl_c;
                sums[3] += terms.kl_t;
            }
            lr = lr_at(step, total_steps, cfg.base_lr)?;
            optimizer.step(&mut model.store, &acc, lr, cfg);
            step += 1;
        }
        let n = train.len() as f64;
        let val_acc = metric(model)?;
        history.epochs.push(EpochRecord {
            epoch,
            loss: sums[0] / n,
            ce: sums[1] / n,
            kl_c: sums[2] / n,
            kl_t: sums[3] / n,
            val_acc,
            lr,
        });
        match stopper.observe(epoch, val_acc) {
            StopDecision::Improved => best_store = model.store.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    model.store = best_store;
    history.best_epoch = stopper.best_epoch();
    history.best_val_acc = stopper.best().unwrap_or(0.0);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{tiny_model_config, tiny_synth_config};
    use crate::synth::generate_dataset;
    use crate::tensor::Tensor;
    use crate::variants::VariantKind;

    fn tiny_model(kind: VariantKind, seed: u64) -> Model {
        Model::new(kind, &tiny_model_config(), seed).unwrap()
    }

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(lr_at(0, 100, 1e-4).unwrap(), 1e-4);
        assert!((lr_at(50, 100, 1e-4).unwrap() - 5e-5).abs() < 1e-18);
        assert!((lr_at(25, 100, 1.0).unwrap() - (0.5 + 0.5 * (PI / 4.0).cos())).abs() < 1e-15);
        assert!(lr_at(100, 100, 1e-4).unwrap().abs() < 1e-20);
        let lrs: Vec<f64> = (0..=10).map(|s| lr_at(s, 10, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lr_at(0, 0, 1.0).is_err());
        assert!(lr_at(11, 10, 1.0).is_err());
    }

    #[test]
    fn loss_adds_weighted_kl_terms() {
        assert_eq!(combine_loss(1.0, 2.0, 3.0, 0.05), 1.25);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(&[1.0, -0.5, 0.3]));
        let kl_c = tape.constant(Tensor::scalar(2.0));
        let kl_t = tape.constant(Tensor::scalar(0.5));
        let ce = total_loss(&mut tape, logits, 0, None, None, 0.3).unwrap();
        let zero = total_loss(&mut tape, logits, 0, Some(kl_c), Some(kl_t), 0.0).unwrap();
        let full = total_loss(&mut tape, logits, 0, Some(kl_c), Some(kl_t), 0.3).unwrap();
        let ce = tape.value(ce).item();
        let expect_ce = -(1.0f64.exp() / (1.0f64.exp() + (-0.5f64).exp() + 0.3f64.exp())).ln();
        assert!((ce - expect_ce).abs() < 1e-14);
        assert_eq!(tape.value(zero).item(), ce);
        assert!((tape.value(full).item() - combine_loss(ce, 2.0, 0.5, 0.3)).abs() < 1e-14);
    }

    #[test]
    fn adamw_matches_a_scalar_reference() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::vector(&[0.5, -2.0]));
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut opt = AdamW::new(&store);
        let grads = [vec![vec![0.2, -1.0]], vec![vec![-0.4, 3.0]]];
        let lr = 0.01;
        let mut p = [0.5f64, -2.0];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for (t, g) in grads.iter().enumerate() {
            opt.step(&mut store, g, lr, &cfg);
            let t = t as i32 + 1;
            for k in 0..2 {
                m[k] = 0.9 * m[k] + 0.1 * g[0][k];
                v[k] = 0.999 * v[k] + 0.001 * g[0][k] * g[0][k];
                let m_hat = m[k] / (1.0 - 0.9f64.powi(t));
                let v_hat = v[k] / (1.0 - 0.999f64.powi(t));
                p[k] = p[k] * (1.0 - lr * 0.1) - lr * m_hat / (v_hat.sqrt() + 1e-8);
            }
            for k in 0..2 {
                assert!((store.values()[0].data()[k] - p[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn early_stopping_needs_strict_improvement() {
        let mut stop = EarlyStopping::new(3);
        let decisions: Vec<StopDecision> =
            [0.5, 0.6, 0.6, 0.55, 0.6].iter().enumerate().map(|(i, &m)| stop.observe(i + 1, m)).collect();
        use StopDecision::*;
        assert_eq!(decisions, [Improved, Improved, Continue, Continue, Stop]);
        assert_eq!(stop.best(), Some(0.6));
        assert_eq!(stop.best_epoch(), 2);
    }

    #[test]
    fn fit_stops_on_the_scripted_metric_and_restores_the_best_epoch() {
        let samples = generate_dataset(&tiny_synth_config(), 12).unwrap();
        let mut model = tiny_model(VariantKind::FullVdan, 1);
        let cfg = TrainConfig { max_epochs: 20, patience: 2, batch_size: 5, base_lr: 1e-3, ..TrainConfig::default() };
        let script = [0.2, 0.5, 0.4, 0.5, 0.9];
        let mut snapshots = Vec::new();
        let history = fit_with_metric(&mut model, &samples, &cfg, 3, |m| {
            snapshots.push(m.store.clone());
            Ok(script[snapshots.len() - 1])
        })
        .unwrap();
        assert_eq!(history.epochs.len(), 4);
        assert_eq!(history.best_epoch, 2);
        assert_eq!(history.best_val_acc, 0.5);
        assert_eq!(model.store, snapshots[1]);
        assert_ne!(model.store, snapshots[3]);
        for (i, r) in history.epochs.iter().enumerate() {
            assert_eq!(r.epoch, i + 1);
            assert!((r.loss - combine_loss(r.ce, r.kl_c, r.kl_t, cfg.lambda)).abs() < 1e-9);
            assert!(r.kl_c > 0.0 && r.kl_t > 0.0);
        }
        // Three batches per epoch over twenty planned epochs.
        assert_eq!(history.epochs[0].lr, lr_at(2, 60, 1e-3).unwrap());
    }

    #[test]
    fn fit_is_deterministic_and_seed_sensitive() {
        let samples = generate_dataset(&tiny_synth_config(), 12).unwrap();
        let cfg = TrainConfig { max_epochs: 2, batch_size: 4, base_lr: 1e-3, ..TrainConfig::default() };
        let run = |seed| {
            let mut m = tiny_model(VariantKind::FullVdan, 0);
            let h = fit(&mut m, &samples[..8], &samples[8..], &cfg, seed).unwrap();
            (m.store, h)
        };
        let a = run(4);
        assert_eq!(a, run(4));
        assert_ne!(a.0, run(5).0);
    }

    #[test]
    fn overfits_a_small_training_set() {
        let samples = generate_dataset(&tiny_synth_config(), 16).unwrap();
        let mut model = tiny_model(VariantKind::FullVdan, 2);
        let cfg = TrainConfig { max_epochs: 60, patience: 60, batch_size: 4, base_lr: 1e-2, ..TrainConfig::default() };
        let train = samples.clone();
        let history = fit_with_metric(&mut model, &samples, &cfg, 0, |m| accuracy(m, &train)).unwrap();
        assert_eq!(accuracy(&model, &samples).unwrap(), 1.0, "{:?}", history.epochs.last());
        assert!(history.epochs.last().unwrap().ce < history.epochs[0].ce);
    }

    #[test]
    fn stratified_split_partitions_each_class() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let split = stratified_split(&labels, 0.7, 0.15, 9);
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for class in 0..4 {
            let count = |idx: &[usize]| idx.iter().filter(|&&i| labels[i] == class).count();
            assert_eq!((count(&split.train), count(&split.val), count(&split.test)), (18, 4, 3));
        }
        assert_eq!(split, stratified_split(&labels, 0.7, 0.15, 9));
        assert_ne!(split, stratified_split(&labels, 0.7, 0.15, 10));
    }

    #[test]
    fn invalid_settings_name_their_field() {
        let bad = [
            (TrainConfig { base_lr: 0.0, ..TrainConfig::default() }, "train.base_lr"),
            (TrainConfig { beta2: 1.0, ..TrainConfig::default() }, "train.beta2"),
            (TrainConfig { batch_size: 0, ..TrainConfig::default() }, "train.batch_size"),
            (TrainConfig { val_fraction: 0.3, ..TrainConfig::default() }, "train.val_fraction"),
            (TrainConfig { lambda: -1.0, ..TrainConfig::default() }, "train.lambda"),
        ];
        for (cfg, name) in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == name), "{name}");
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let history = TrainHistory {
            epochs: vec![EpochRecord { epoch: 1, loss: 1.5, ce: 1.0, kl_c: 4.0, kl_t: 6.0, val_acc: 0.5, lr: 1e-4 }],
            best_epoch: 1,
            best_val_acc: 0.5,
        };
        let mut out = Vec::new();
        history.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,loss,ce,kl_c,kl_t,val_acc,lr\n1,1.5,1,4,6,0.5,0.0001\n");
    }
}
