//! Classification metrics, attention sparsity, physical alignment and
//! noise-robustness sweeps.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{inject_noise, magnitude_std_profile, std_dev, CsiSample};
use crate::tensor::argmax;
use crate::vdan::{Mode, PathAxis};

/// Counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_pairs(classes: usize, labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::InvalidInput("labels and predictions differ in length".into()));
        }
        let mut cm = Self::new(classes);
        for (&y, &p) in labels.iter().zip(predictions) {
            cm.record(y, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, label: usize, prediction: usize) -> Result<()> {
        let k = self.counts.len();
        if label >= k || prediction >= k {
            return Err(Error::InvalidInput(format!("class out of range for {k} classes")));
        }
        self.counts[label][prediction] += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..self.counts.len()).map(|k| self.counts[k][k]).sum();
        hits as f64 / self.total().max(1) as f64
    }
}

/// Inference-mode accuracy and confusion matrix.
pub fn evaluate(model: &Model, samples: &[CsiSample]) -> Result<(f64, ConfusionMatrix)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty sample set".into()));
    }
    let mut cm = ConfusionMatrix::new(model.config.shape.classes);
    for s in samples {
        cm.record(s.label, model.predict(&s.data)?)?;
    }
    Ok((cm.accuracy(), cm))
}

/// Mean absolute difference over all ordered pairs divided by twice the
/// mean: `Σᵢ Σⱼ |wᵢ − wⱼ| / (2 n Σ w)`.
pub fn gini(w: &[f64]) -> Result<f64> {
    if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput("gini needs finite non-negative entries".into()));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("gini of an all-zero vector is undefined".into()));
    }
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // With ascending order, Σᵢ Σⱼ |wᵢ − wⱼ| = 2 Σₖ (2k − n + 1) w₍ₖ₎.
    let weighted: f64 = sorted.iter().enumerate().map(|(k, &v)| (2.0 * k as f64 - n + 1.0) * v).sum();
    Ok(weighted / (n * total))
}

/// Pearson correlation of two equally long vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput("pearson needs two non-empty vectors of equal length".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::InvalidInput("correlation with a constant vector is undefined".into()));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Per-index magnitude standard deviation along `axis`, pooled over the
/// remaining axes of every sample.
pub fn reference_profile(samples: &[CsiSample], axis: PathAxis) -> Result<Vec<f64>> {
    let first = samples.first().ok_or_else(|| Error::InvalidInput("no samples".into()))?;
    let n = first.data.shape()[axis.index()];
    let mut groups = vec![Vec::new(); n];
    for s in samples {
        if s.data.shape() != first.data.shape() {
            return Err(Error::InvalidInput("samples differ in shape".into()));
        }
        let (c_n, t_n, s_n) = (s.subcarriers(), s.frames(), s.streams());
        let mags = s.magnitudes();
        for c in 0..c_n {
            for t in 0..t_n {
                let idx = if axis == PathAxis::Subcarrier { c } else { t };
                groups[idx].extend_from_slice(&mags[(c * t_n + t) * s_n..(c * t_n + t + 1) * s_n]);
            }
        }
    }
    Ok(groups.iter().map(|g| std_dev(g)).collect())
}

/// Correlation between attention weights and the pooled magnitude std
/// profile of `samples`.
pub fn alignment_score(w: &[f64], samples: &[CsiSample], axis: PathAxis) -> Result<f64> {
    let reference = reference_profile(samples, axis)?;
    if reference.len() != w.len() {
        return Err(Error::InvalidInput(format!(
            "weights of length {} against an axis of length {}",
            w.len(),
            reference.len()
        )));
    }
    pearson(w, &reference)
}

/// Per-sample correlation of attention weights with that sample's own
/// magnitude std profile.
pub fn sample_alignment(w: &[f64], sample: &CsiSample, axis: PathAxis) -> Result<f64> {
    pearson(w, &magnitude_std_profile(sample, axis.index()))
}

/// One point of a noise sweep; `snr_db = None` is the noiseless entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub snr_db: Option<f64>,
    pub accuracy: f64,
}

impl Serialize for SweepPoint {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        (self.snr_db, self.accuracy).serialize(serializer)
    }
}

/// Accuracy on noisy copies of `clean` at each SNR, plus the noiseless
/// entry first. Sample `i` uses noise seed `noise_seed + i`.
pub fn snr_sweep(model: &Model, clean: &[CsiSample], snr_list_db: &[f64], noise_seed: u64) -> Result<Vec<SweepPoint>> {
    if snr_list_db.is_empty() {
        return Err(Error::InvalidInput("snr list is empty".into()));
    }
    let mut curve = vec![SweepPoint { snr_db: None, accuracy: evaluate(model, clean)?.0 }];
    for &snr in snr_list_db {
        let noisy = clean
            .iter()
            .enumerate()
            .map(|(i, s)| inject_noise(s, Some(snr), noise_seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        curve.push(SweepPoint { snr_db: Some(snr), accuracy: evaluate(model, &noisy)?.0 });
    }
    Ok(curve)
}

/// Attention weights of every sample in inference mode.
pub struct AttentionTrace {
    pub w_c: Vec<Vec<f64>>,
    pub w_t: Vec<Vec<f64>>,
}

pub fn attention_trace(model: &Model, samples: &[CsiSample]) -> Result<AttentionTrace> {
    let mut trace = AttentionTrace { w_c: Vec::new(), w_t: Vec::new() };
    for s in samples {
        let out = model.infer(&s.data, Mode::Infer)?;
        if let Some(w) = out.w_c {
            trace.w_c.push(w);
        }
        if let Some(w) = out.w_t {
            trace.w_t.push(w);
        }
    }
    Ok(trace)
}

/// Element-wise mean of equally long vectors.
pub fn mean_vector(rows: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = rows.first()?;
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    Some(acc.into_iter().map(|v| v / n).collect())
}

/// Fraction of samples whose mask is set at each index, pooled over
/// `samples`; `None` if any sample lacks the mask.
pub fn mask_frequency(samples: &[CsiSample], axis: PathAxis) -> Option<Vec<f64>> {
    let rows = samples
        .iter()
        .map(|s| {
            let mask = match axis {
                PathAxis::Subcarrier => s.subcarrier_mask.as_ref(),
                PathAxis::Time => s.time_mask.as_ref(),
            }?;
            Some(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        })
        .collect::<Option<Vec<Vec<f64>>>>()?;
    mean_vector(&rows)
}

/// Sparsity and alignment summary of one model's attention on a sample set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionReport {
    /// Mean per-sample Gini of the subcarrier (or channel) weights.
    pub gini_subcarrier: Option<f64>,
    pub gini_temporal: Option<f64>,
    /// Pearson correlation of the mean weights with the pooled magnitude
    /// std profile.
    pub alignment_subcarrier: Option<f64>,
    pub alignment_temporal: Option<f64>,
    /// Mean over samples of the per-sample std-profile correlation.
    pub sample_alignment_subcarrier: Option<f64>,
    pub sample_alignment_temporal: Option<f64>,
    /// Pearson correlation of the mean subcarrier weights with the pooled
    /// ground-truth perturbation indicator.
    pub mask_alignment_subcarrier: Option<f64>,
    /// Share of samples whose temporal weight peaks inside the gesture window.
    pub peak_in_window: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Correlations that are undefined (constant vectors) are reported as
/// `None` instead of failing the whole report.
pub fn attention_report(model: &Model, samples: &[CsiSample]) -> Result<AttentionReport> {
    let trace = attention_trace(model, samples)?;
    let c_n = model.config.shape.subcarriers;
    let spatial = |w: &Vec<Vec<f64>>, len: usize| !w.is_empty() && w[0].len() == len;

    let mut report = AttentionReport {
        gini_subcarrier: None,
        gini_temporal: None,
        alignment_subcarrier: None,
        alignment_temporal: None,
        sample_alignment_subcarrier: None,
        sample_alignment_temporal: None,
        mask_alignment_subcarrier: None,
        peak_in_window: None,
    };
    if !trace.w_c.is_empty() {
        report.gini_subcarrier = mean(trace.w_c.iter().map(|w| gini(w)).collect::<Result<Vec<_>>>()?.into_iter());
    }
    if !trace.w_t.is_empty() {
        report.gini_temporal = mean(trace.w_t.iter().map(|w| gini(w)).collect::<Result<Vec<_>>>()?.into_iter());
    }
    if spatial(&trace.w_c, c_n) {
        let w = mean_vector(&trace.w_c).expect("non-empty");
        report.alignment_subcarrier = alignment_score(&w, samples, PathAxis::Subcarrier).ok();
        report.sample_alignment_subcarrier = mean(
            trace.w_c.iter().zip(samples).filter_map(|(w, s)| sample_alignment(w, s, PathAxis::Subcarrier).ok()),
        );
        report.mask_alignment_subcarrier =
            mask_frequency(samples, PathAxis::Subcarrier).and_then(|m| pearson(&w, &m).ok());
    }
    if spatial(&trace.w_t, model.config.shape.frames) {
        let w = mean_vector(&trace.w_t).expect("non-empty");
        report.alignment_temporal = alignment_score(&w, samples, PathAxis::Time).ok();
        report.sample_alignment_temporal =
            mean(trace.w_t.iter().zip(samples).filter_map(|(w, s)| sample_alignment(w, s, PathAxis::Time).ok()));
        if samples.iter().all(|s| s.time_mask.is_some()) {
            let hits = trace
                .w_t
                .iter()
                .zip(samples)
                .filter(|(w, s)| s.time_mask.as_ref().expect("checked")[argmax(w)])
                .count();
            report.peak_in_window = Some(hits as f64 / samples.len() as f64);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisPair {
    pub subcarrier: Option<f64>,
    pub temporal: Option<f64>,
}

/// Metrics file contents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub gini: AxisPair,
    pub alignment: AxisPair,
    pub snr_curve: Vec<SweepPoint>,
}
