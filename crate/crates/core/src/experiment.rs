//! Experiment configuration and the data/training pipeline shared by the
//! command-line tool and the acceptance suite.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, ConfusionMatrix};
use crate::model::{ArchConfig, InputShape, Model, ModelConfig};
use crate::seed::{derive_seed, TAG_NOISE, TAG_SWEEP};
use crate::synth::{generate_dataset, inject_noise, CsiSample, SynthConfig};
use crate::train::{fit, stratified_split, TrainConfig, TrainHistory};
use crate::variants::VariantKind;

/// Dataset size and corruption used by an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    /// Noise level of the training data; `null` keeps it clean.
    pub snr_db: Option<f64>,
    /// Levels of the robustness sweep on the clean test split.
    pub sweep_snr_db: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 1000, snr_db: Some(15.0), sweep_snr_db: vec![20.0, 15.0, 10.0, 5.0, 0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub variant: VariantKind,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            variant: VariantKind::FullVdan,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Builds a config from flat dotted keys (`"train.lambda": 0.1`) on top
    /// of the defaults.
    pub fn from_flat(entries: &Map<String, Value>) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in entries {
            cfg.set(key, value.clone())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key, rejecting unknown keys and ill-typed values.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let slot = key
            .split('.')
            .try_fold(&mut tree, |node, part| node.as_object_mut().and_then(|m| m.get_mut(part)))
            .filter(|slot| !slot.is_object())
            .ok_or_else(|| Error::config(key, "unknown key"))?;
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::config(key, e.to_string()))?;
        Ok(())
    }

    /// Applies a `key=value` override; the value is read as JSON when it
    /// parses and as a plain string otherwise.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        self.set(key.trim(), value)
    }

    /// The config as flat dotted keys, the inverse of [`Self::from_flat`].
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut flat = Map::new();
        if let Value::Object(top) = serde_json::to_value(self).expect("config serializes") {
            for (section, value) in top {
                match value {
                    Value::Object(fields) => {
                        for (field, v) in fields {
                            flat.insert(format!("{section}.{field}"), v);
                        }
                    }
                    other => {
                        flat.insert(section, other);
                    }
                }
            }
        }
        flat
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.model_config()?;
        if self.data.samples == 0 {
            return Err(Error::config("data.samples", "must be positive"));
        }
        if self.data.snr_db.is_some_and(|v| !v.is_finite()) {
            return Err(Error::config("data.snr_db", "must be finite or null"));
        }
        if self.data.sweep_snr_db.is_empty() || self.data.sweep_snr_db.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("data.sweep_snr_db", "must be a non-empty list of finite levels"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape {
            subcarriers: self.synth.subcarriers,
            frames: self.synth.frames,
            streams: self.synth.streams,
            classes: self.synth.classes,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.input_shape(), self.model.clone())
    }

    /// Seed of the noise used by the robustness sweep.
    pub fn sweep_seed(&self) -> u64 {
        derive_seed(self.synth.seed, TAG_SWEEP, 0)
    }
}

/// Stratified splits of a generated dataset; the test split is also kept
/// noise-free for robustness sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: Vec<CsiSample>,
    pub val: Vec<CsiSample>,
    pub test: Vec<CsiSample>,
    pub clean_test: Vec<CsiSample>,
}

/// Adds the configured noise to sample `i` with its own derived seed.
pub fn corrupt(cfg: &ExperimentConfig, clean: &[CsiSample]) -> Result<Vec<CsiSample>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, s)| inject_noise(s, cfg.data.snr_db, derive_seed(cfg.synth.seed, TAG_NOISE, i as u64)))
        .collect()
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let clean = generate_dataset(&cfg.synth, cfg.data.samples)?;
    split_data(cfg, &clean, &corrupt(cfg, &clean)?)
}

/// Splits paired clean/noisy samples by label.
pub fn split_data(cfg: &ExperimentConfig, clean: &[CsiSample], noisy: &[CsiSample]) -> Result<PreparedData> {
    if clean.len() != noisy.len() {
        return Err(Error::InvalidInput("clean and noisy sets differ in size".into()));
    }
    let labels: Vec<usize> = noisy.iter().map(|s| s.label).collect();
    let split = stratified_split(&labels, cfg.train.train_fraction, cfg.train.val_fraction, cfg.synth.seed);
    let pick = |from: &[CsiSample], idx: &[usize]| idx.iter().map(|&i| from[i].clone()).collect::<Vec<_>>();
    let data = PreparedData {
        train: pick(noisy, &split.train),
        val: pick(noisy, &split.val),
        test: pick(noisy, &split.test),
        clean_test: pick(clean, &split.test),
    };
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::config("data.samples", "too few samples for a non-empty train/val/test split"));
    }
    Ok(data)
}

/// A trained replica and its test-split scores.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub kind: VariantKind,
    pub seed: u64,
    pub model: Model,
    pub history: TrainHistory,
    pub test_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

pub fn train_run(cfg: &ExperimentConfig, data: &PreparedData, kind: VariantKind, seed: u64) -> Result<TrainedRun> {
    let mut model = Model::new(kind, &cfg.model_config()?, seed)?;
    let history = fit(&mut model, &data.train, &data.val, &cfg.train, seed)?;
    let (test_accuracy, confusion) = evaluate(&model, &data.test)?;
    Ok(TrainedRun { kind, seed, model, history, test_accuracy, confusion })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_round_trip_through_flat_keys() {
        let cfg = ExperimentConfig::default();
        let flat = cfg.to_flat();
        assert_eq!(flat["train.lambda"], json!(0.05));
        assert_eq!(flat["variant"], json!("vdan"));
        assert_eq!(ExperimentConfig::from_flat(&flat).unwrap(), cfg);
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("train.batch_size=16").unwrap();
        cfg.apply_override("variant=dual-det").unwrap();
        cfg.apply_override("data.snr_db=null").unwrap();
        cfg.apply_override("seeds=[3,4]").unwrap();
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.variant, VariantKind::DualDet);
        assert_eq!(cfg.data.snr_db, None);
        assert_eq!(cfg.seeds, vec![3, 4]);
    }

    #[test]
    fn bad_keys_and_values_name_the_field() {
        let mut cfg = ExperimentConfig::default();
        for (assignment, field) in [
            ("train.nope=1", "train.nope"),
            ("train=1", "train"),
            ("train.batch_size=\"big\"", "train.batch_size"),
            ("variant=resnet", "variant"),
        ] {
            match cfg.apply_override(assignment) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{assignment}: {other:?}"),
            }
        }
        let mut flat = Map::new();
        flat.insert("train.base_lr".into(), json!(-1.0));
        assert!(matches!(
            ExperimentConfig::from_flat(&flat),
            Err(Error::Config { field, .. }) if field == "train.base_lr"
        ));
    }

    #[test]
    fn split_is_stratified_and_paired() {
        let cfg = ExperimentConfig {
            data: DataConfig { samples: 40, ..DataConfig::default() },
            synth: SynthConfig { frames: 20, ..SynthConfig::default() },
            model: ArchConfig { feature_len: 5, ..ArchConfig::default() },
            ..ExperimentConfig::default()
        };
        let data = prepare_data(&cfg).unwrap();
        assert_eq!(data.train.len() + data.val.len() + data.test.len(), 40);
        assert_eq!(data.train.len(), 30);
        for (noisy, clean) in data.test.iter().zip(&data.clean_test) {
            assert_eq!(noisy.label, clean.label);
            assert_eq!(noisy.time_mask, clean.time_mask);
            assert_ne!(noisy.data, clean.data);
        }
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
