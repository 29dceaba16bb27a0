use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

use vdan_core::checkpoint;
use vdan_core::dataset::{read_dataset, write_dataset, DatasetHeader};
use vdan_core::experiment::{corrupt, mean_std, split_data, train_run, ExperimentConfig, PreparedData};
use vdan_core::gradcheck::variant_suite;
use vdan_core::metrics::{attention_report, attention_trace, evaluate, snr_sweep, AxisPair, MetricsReport};
use vdan_core::model::Model;
use vdan_core::synth::{generate_dataset, magnitude_std_profile, CsiSample};
use vdan_core::tensor::argmax;
use vdan_core::variants::VariantKind;
use vdan_core::vdan::PathAxis;

use crate::error::CliError;
use crate::ConfigArgs;

type CmdResult = Result<(), CliError>;

/// A validated config and where it came from.
pub struct Resolved {
    pub cfg: ExperimentConfig,
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
                let flat: Map<String, Value> = serde_json::from_str(&text)
                    .map_err(|e| CliError::Invalid(format!("config {} is not a JSON object: {e}", path.display())))?;
                ExperimentConfig::from_flat(&flat)?
            }
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(Resolved { cfg, config_file: self.config.clone(), overrides: self.overrides.clone() })
    }
}

impl Resolved {
    fn out_dir(&self) -> Result<&Path, CliError> {
        let dir = self.cfg.output_dir.as_path();
        fs::create_dir_all(dir)?;
        Ok(dir)
    }

    /// Writes `<command>.manifest.json` listing the resolved config, seeds
    /// and produced files. Only `created_unix` varies between identical runs.
    fn write_manifest(&self, command: &str, outputs: &[PathBuf]) -> CmdResult {
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_file": self.config_file,
            "overrides": self.overrides,
            "config": self.cfg.to_flat(),
            "seeds": self.cfg.seeds,
            "outputs": outputs,
            "created_unix": created,
        });
        let path = self.out_dir()?.join(format!("{command}.manifest.json"));
        fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn header_of(cfg: &ExperimentConfig) -> DatasetHeader {
    let shape = cfg.input_shape();
    DatasetHeader {
        subcarriers: shape.subcarriers,
        frames: shape.frames,
        streams: shape.streams,
        classes: shape.classes,
    }
}

/// Clean samples from `data`, or freshly generated from the config.
fn clean_samples(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<CsiSample>, CliError> {
    let Some(path) = data else {
        return Ok(generate_dataset(&cfg.synth, cfg.data.samples)?);
    };
    let (header, samples) = read_dataset(path)?;
    if header != header_of(cfg) {
        return Err(CliError::Invalid(format!(
            "dataset {} has shape {header:?}, config expects {:?}",
            path.display(),
            header_of(cfg)
        )));
    }
    Ok(samples)
}

fn prepared(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<PreparedData, CliError> {
    let clean = clean_samples(cfg, data)?;
    Ok(split_data(cfg, &clean, &corrupt(cfg, &clean)?)?)
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<Model, CliError> {
    let model = checkpoint::load(path)?;
    if model.config.shape != cfg.input_shape() {
        return Err(CliError::Invalid(format!(
            "checkpoint {} expects inputs {:?}, config describes {:?}",
            path.display(),
            model.config.shape,
            cfg.input_shape()
        )));
    }
    Ok(model)
}

/// Output path named after the checkpoint, e.g. `vdan-seed0.metrics.json`.
fn beside(dir: &Path, checkpoint: &Path, suffix: &str) -> PathBuf {
    let stem = checkpoint.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    dir.join(format!("{stem}.{suffix}"))
}

fn run_name(kind: VariantKind, seed: u64) -> String {
    format!("{kind}-seed{seed}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn show_config(r: &Resolved) -> CmdResult {
    println!("{}", serde_json::to_string_pretty(&r.cfg.to_flat())?);
    Ok(())
}

pub fn synth(r: &Resolved) -> CmdResult {
    let samples = generate_dataset(&r.cfg.synth, r.cfg.data.samples)?;
    let path = r.out_dir()?.join("dataset.bin");
    write_dataset(&path, header_of(&r.cfg), &samples)?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    r.write_manifest("synth", &[path])
}

pub fn train(r: &Resolved, data: Option<&Path>) -> CmdResult {
    let cfg = &r.cfg;
    let prepared = prepared(cfg, data)?;
    let dir = r.out_dir()?;
    let mut outputs = Vec::new();
    for &seed in &cfg.seeds {
        let run = train_run(cfg, &prepared, cfg.variant, seed)?;
        let name = run_name(cfg.variant, seed);
        let ckpt = dir.join(format!("{name}.ckpt"));
        checkpoint::save(&run.model, &ckpt)?;
        let history = dir.join(format!("{name}.history.csv"));
        let mut csv = Vec::new();
        run.history.write_csv(&mut csv)?;
        fs::write(&history, csv)?;
        println!(
            "{name}: test accuracy {:.4} (best epoch {} of {})",
            run.test_accuracy,
            run.history.best_epoch,
            run.history.epochs.len()
        );
        outputs.extend([ckpt, history]);
    }
    r.write_manifest("train", &outputs)
}

pub fn eval(r: &Resolved, ckpt: &Path, data: Option<&Path>) -> CmdResult {
    let cfg = &r.cfg;
    let model = load_model(cfg, ckpt)?;
    let prepared = prepared(cfg, data)?;
    let (accuracy, confusion) = evaluate(&model, &prepared.test)?;
    let attention = attention_report(&model, &prepared.test)?;
    let report = MetricsReport {
        accuracy,
        confusion,
        gini: AxisPair { subcarrier: attention.gini_subcarrier, temporal: attention.gini_temporal },
        alignment: AxisPair { subcarrier: attention.alignment_subcarrier, temporal: attention.alignment_temporal },
        snr_curve: snr_sweep(&model, &prepared.clean_test, &cfg.data.sweep_snr_db, cfg.sweep_seed())?,
    };
    let path = beside(r.out_dir()?, ckpt, "metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{}: test accuracy {accuracy:.4}", model.kind);
    r.write_manifest("eval", &[path])
}

pub fn sweep(r: &Resolved, ckpt: &Path, data: Option<&Path>) -> CmdResult {
    let cfg = &r.cfg;
    let model = load_model(cfg, ckpt)?;
    let prepared = prepared(cfg, data)?;
    let curve = snr_sweep(&model, &prepared.clean_test, &cfg.data.sweep_snr_db, cfg.sweep_seed())?;
    let mut csv = String::from("snr_db,accuracy\n");
    for p in &curve {
        let level = p.snr_db.map_or_else(|| "inf".to_owned(), |v| v.to_string());
        writeln!(csv, "{level},{}", p.accuracy).expect("writing to a string");
    }
    let path = beside(r.out_dir()?, ckpt, "snr.csv");
    fs::write(&path, csv)?;
    r.write_manifest("snr-sweep", &[path])
}

pub fn inspect_attention(r: &Resolved, ckpt: &Path, data: Option<&Path>) -> CmdResult {
    let cfg = &r.cfg;
    let model = load_model(cfg, ckpt)?;
    let samples = prepared(cfg, data)?.test;
    let trace = attention_trace(&model, &samples)?;
    let report = attention_report(&model, &samples)?;

    let mut weights = String::from("sample,label,axis,index,weight,reference_std,mask\n");
    let mut per_sample = String::from("sample,label,alignment_subcarrier,alignment_temporal,temporal_peak,peak_in_window\n");
    for (i, s) in samples.iter().enumerate() {
        let mut alignment = [None, None];
        for (slot, (axis, name, rows, mask)) in [
            (PathAxis::Subcarrier, "subcarrier", &trace.w_c, &s.subcarrier_mask),
            (PathAxis::Time, "time", &trace.w_t, &s.time_mask),
        ]
        .into_iter()
        .enumerate()
        {
            let Some(w) = rows.get(i) else { continue };
            // Channel attention has no per-subcarrier reference.
            let reference = magnitude_std_profile(s, axis.index());
            let physical = reference.len() == w.len();
            if physical {
                alignment[slot] = vdan_core::metrics::pearson(w, &reference).ok();
            }
            for (j, v) in w.iter().enumerate() {
                let ref_std = if physical { reference[j].to_string() } else { String::new() };
                let m = match mask {
                    Some(m) if physical => u8::from(m[j]).to_string(),
                    _ => String::new(),
                };
                writeln!(weights, "{i},{},{name},{j},{v},{ref_std},{m}", s.label).expect("writing to a string");
            }
        }
        let peak = trace.w_t.get(i).filter(|w| w.len() == s.frames()).map(|w| argmax(w));
        let inside = peak.zip(s.time_mask.as_ref()).map(|(p, m)| u8::from(m[p]).to_string()).unwrap_or_default();
        writeln!(
            per_sample,
            "{i},{},{},{},{},{inside}",
            s.label,
            fmt_opt(alignment[0]),
            fmt_opt(alignment[1]),
            peak.map(|p| p.to_string()).unwrap_or_default()
        )
        .expect("writing to a string");
    }
    let dir = r.out_dir()?;
    let weights_path = beside(dir, ckpt, "attention.csv");
    let samples_path = beside(dir, ckpt, "alignment.csv");
    let summary_path = beside(dir, ckpt, "attention.json");
    fs::write(&weights_path, weights)?;
    fs::write(&samples_path, per_sample)?;
    fs::write(&summary_path, serde_json::to_string_pretty(&report)? + "\n")?;
    r.write_manifest("inspect-attention", &[weights_path, samples_path, summary_path])
}

pub fn ablate(r: &Resolved, data: Option<&Path>) -> CmdResult {
    let cfg = &r.cfg;
    let prepared = prepared(cfg, data)?;
    let model_cfg = cfg.model_config()?;
    let dir = r.out_dir()?;
    let history_dir = dir.join("ablate");
    fs::create_dir_all(&history_dir)?;

    let mut runs_csv = String::from("variant,seed,test_accuracy,best_epoch,epochs\n");
    let mut summary = String::from("variant,runs,mean_accuracy,std_accuracy,extra_params\n");
    let mut outputs = Vec::new();
    println!("{:<9} {:>18} {:>12}", "variant", "accuracy (%)", "extra params");
    for kind in VariantKind::ALL {
        let mut accs = Vec::new();
        for &seed in &cfg.seeds {
            let run = train_run(cfg, &prepared, kind, seed)?;
            let history = history_dir.join(format!("{}.history.csv", run_name(kind, seed)));
            let mut csv = Vec::new();
            run.history.write_csv(&mut csv)?;
            fs::write(&history, csv)?;
            outputs.push(history);
            writeln!(
                runs_csv,
                "{kind},{seed},{},{},{}",
                run.test_accuracy,
                run.history.best_epoch,
                run.history.epochs.len()
            )
            .expect("writing to a string");
            accs.push(run.test_accuracy);
        }
        let (mean, std) = mean_std(&accs);
        let extra = Model::new(kind, &model_cfg, 0)?.extra_params();
        writeln!(summary, "{kind},{},{mean},{std},{extra}", accs.len()).expect("writing to a string");
        println!("{:<9} {:>9.2} ± {:<6.2} {:>12}", kind.as_str(), 100.0 * mean, 100.0 * std, extra);
    }
    let summary_path = dir.join("ablation.csv");
    let runs_path = dir.join("ablation_runs.csv");
    fs::write(&summary_path, summary)?;
    fs::write(&runs_path, runs_csv)?;
    outputs.splice(0..0, [summary_path, runs_path]);
    r.write_manifest("ablate", &outputs)
}

pub fn gradcheck(r: &Resolved, tolerance: f64, step: f64, seed: u64) -> CmdResult {
    let reports = variant_suite(seed, step)?;
    let mut csv = String::from("variant,max_rel_error,entries,worst_param,worst_entry,analytic,numeric\n");
    let mut failing = Vec::new();
    for (kind, rep) in &reports {
        writeln!(
            csv,
            "{kind},{},{},{},{},{},{}",
            rep.max_rel_error, rep.entries, rep.worst.0, rep.worst.1, rep.analytic, rep.numeric
        )
        .expect("writing to a string");
        let ok = rep.max_rel_error < tolerance;
        println!("{:<9} max relative error {:.3e} {}", kind.as_str(), rep.max_rel_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failing.push(kind.as_str());
        }
    }
    let path = r.out_dir()?.join("gradcheck.csv");
    fs::write(&path, csv)?;
    r.write_manifest("gradcheck", &[path])?;
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check above {tolerance:e} for {}", failing.join(", "))))
    }
}
