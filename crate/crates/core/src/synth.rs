//! Synthetic CSI with planted time-frequency sparsity.
//!
//! Each sample is a static channel (one complex gain per subcarrier and
//! spatial stream, constant over time) plus a gesture term: a complex
//! sinusoid at the class's Doppler frequency that is present only on the
//! class's perturbed subcarriers and only inside a contiguous time window.
//!
//! The perturbed subcarriers of every class are drawn once per dataset seed
//! from a shared gesture-sensitive band, so a fixed environment always has
//! the same sensitive subcarriers while different gestures excite
//! different subsets of them. The window start is drawn per sample.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from, TAG_MASK, TAG_NOISE, TAG_SAMPLE};
use crate::tensor::Tensor;

/// One labelled CSI capture of shape `[C, T, S, 2]` (real/imag innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub data: Tensor,
    pub label: usize,
    /// `true` for subcarriers the gesture perturbs.
    pub subcarrier_mask: Option<Vec<bool>>,
    /// `true` for frames inside the gesture window.
    pub time_mask: Option<Vec<bool>>,
}

impl CsiSample {
    pub fn subcarriers(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn streams(&self) -> usize {
        self.data.shape()[2]
    }

    /// Magnitude `sqrt(re² + im²)` laid out `[C, T, S]`.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.data().chunks(2).map(|p| p[0].hypot(p[1])).collect()
    }

    /// Mean of `re² + im²` over the whole sample.
    pub fn mean_power(&self) -> f64 {
        let d = self.data.data();
        d.iter().map(|v| v * v).sum::<f64>() / (d.len() / 2) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subcarriers: usize,
    pub frames: usize,
    pub streams: usize,
    pub classes: usize,
    /// Fraction of subcarriers one gesture perturbs.
    pub perturbed_fraction: f64,
    /// Fraction of subcarriers in the gesture-sensitive band the per-class
    /// subsets are drawn from.
    pub sensitive_fraction: f64,
    /// Gesture window length as a fraction of the frames.
    pub window_fraction: f64,
    pub static_gain_scale: f64,
    pub gesture_amplitude: f64,
    /// Doppler frequency per class, in cycles per gesture window.
    pub doppler: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subcarriers: 30,
            frames: 100,
            streams: 3,
            classes: 5,
            perturbed_fraction: 0.3,
            sensitive_fraction: 0.5,
            window_fraction: 0.4,
            static_gain_scale: 0.3,
            gesture_amplitude: 1.0,
            doppler: vec![1.5, 3.5, 5.5, 7.5, 9.5],
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn perturbed_count(&self) -> usize {
        (self.perturbed_fraction * self.subcarriers as f64).round() as usize
    }

    pub fn sensitive_count(&self) -> usize {
        (self.sensitive_fraction * self.subcarriers as f64).round() as usize
    }

    pub fn window_len(&self) -> usize {
        (self.window_fraction * self.frames as f64).round() as usize
    }

    /// Checks every field; the error names the offending one.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("synth.{name}");
        for (name, v) in [
            ("subcarriers", self.subcarriers),
            ("frames", self.frames),
            ("streams", self.streams),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::config(field(name), "must be positive"));
            }
        }
        for (name, v) in [
            ("perturbed_fraction", self.perturbed_fraction),
            ("sensitive_fraction", self.sensitive_fraction),
            ("window_fraction", self.window_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(field(name), "must lie in (0, 1]"));
            }
        }
        if self.perturbed_count() < 1 {
            return Err(Error::config(field("perturbed_fraction"), "must select at least one subcarrier"));
        }
        if self.sensitive_count() < self.perturbed_count() {
            return Err(Error::config(
                field("sensitive_fraction"),
                "band must hold at least the perturbed subcarriers",
            ));
        }
        if self.window_len() < 2 {
            return Err(Error::config(field("window_fraction"), "window must span at least two frames"));
        }
        for (name, v) in [
            ("static_gain_scale", self.static_gain_scale),
            ("gesture_amplitude", self.gesture_amplitude),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field(name), "must be a positive finite number"));
            }
        }
        if self.doppler.len() != self.classes {
            return Err(Error::config(
                field("doppler"),
                format!("needs one frequency per class ({}), got {}", self.classes, self.doppler.len()),
            ));
        }
        if self.doppler.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::config(field("doppler"), "frequencies must be positive"));
        }
        for (i, a) in self.doppler.iter().enumerate() {
            if self.doppler[i + 1..].contains(a) {
                return Err(Error::config(field("doppler"), "frequencies must be distinct"));
            }
        }
        Ok(())
    }

    /// Subcarriers in the gesture-sensitive band, sorted.
    pub fn sensitive_band(&self) -> Vec<usize> {
        let mut rng = rng_from(self.seed, TAG_MASK, u64::MAX);
        let mut band = sample_indices(&mut rng, self.subcarriers, self.sensitive_count()).into_vec();
        band.sort_unstable();
        band
    }

    /// Phase offset of the gesture component on each subcarrier. It depends
    /// on the propagation geometry, so it is fixed per dataset rather than
    /// redrawn per sample.
    pub fn gesture_phases(&self) -> Vec<f64> {
        let mut rng = rng_from(self.seed, TAG_MASK, u64::MAX - 1);
        (0..self.subcarriers).map(|_| rng.random_range(0.0..2.0 * PI)).collect()
    }

    /// Perturbed-subcarrier indicator of one class.
    pub fn class_mask(&self, class_id: usize) -> Vec<bool> {
        let band = self.sensitive_band();
        let mut rng = rng_from(self.seed, TAG_MASK, class_id as u64);
        let mut mask = vec![false; self.subcarriers];
        for i in sample_indices(&mut rng, band.len(), self.perturbed_count()) {
            mask[band[i]] = true;
        }
        mask
    }
}

/// Rounds to the nearest `f32` so payloads survive the 32-bit file format
/// exactly.
fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates one noiseless sample, fully determined by its arguments.
pub fn generate_sample(cfg: &SynthConfig, class_id: usize, sample_seed: u64) -> Result<CsiSample> {
    cfg.validate()?;
    if class_id >= cfg.classes {
        return Err(Error::InvalidInput(format!(
            "class {class_id} out of range for {} classes",
            cfg.classes
        )));
    }
    let (c_n, t_n, s_n) = (cfg.subcarriers, cfg.frames, cfg.streams);
    let mut rng = rng_from(cfg.seed, TAG_SAMPLE, sample_seed);
    let subcarrier_mask = cfg.class_mask(class_id);
    let window = cfg.window_len();
    let start = rng.random_range(0..=t_n - window);
    let time_mask: Vec<bool> = (0..t_n).map(|t| t >= start && t < start + window).collect();

    let statics: Vec<(f64, f64)> = (0..c_n * s_n)
        .map(|_| {
            let mag = cfg.static_gain_scale * rng.random_range(0.5..1.5);
            let phase = rng.random_range(0.0..2.0 * PI);
            (mag * phase.cos(), mag * phase.sin())
        })
        .collect();
    let phases = cfg.gesture_phases();
    let freq = cfg.doppler[class_id];

    let mut data = Vec::with_capacity(c_n * t_n * s_n * 2);
    for c in 0..c_n {
        for t in 0..t_n {
            let gesture = if subcarrier_mask[c] && time_mask[t] {
                let theta = 2.0 * PI * freq * (t - start) as f64 / window as f64 + phases[c];
                (cfg.gesture_amplitude * theta.cos(), cfg.gesture_amplitude * theta.sin())
            } else {
                (0.0, 0.0)
            };
            for s in 0..s_n {
                let (re, im) = statics[c * s_n + s];
                data.push(to_f32_grid(re + gesture.0));
                data.push(to_f32_grid(im + gesture.1));
            }
        }
    }
    Ok(CsiSample {
        data: Tensor::new(vec![c_n, t_n, s_n, 2], data)?,
        label: class_id,
        subcarrier_mask: Some(subcarrier_mask),
        time_mask: Some(time_mask),
    })
}

/// Class-balanced dataset: sample `i` has label `i mod K` and sample seed `i`.
pub fn generate_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<CsiSample>> {
    (0..count)
        .map(|i| generate_sample(cfg, i % cfg.classes, i as u64))
        .collect()
}

/// Adds white Gaussian noise at `snr_db` relative to the sample's mean
/// complex power. `None` returns the sample unchanged.
pub fn inject_noise(sample: &CsiSample, snr_db: Option<f64>, noise_seed: u64) -> Result<CsiSample> {
    let Some(snr_db) = snr_db else {
        return Ok(sample.clone());
    };
    if !snr_db.is_finite() {
        return Err(Error::InvalidInput(format!("snr_db must be finite, got {snr_db}")));
    }
    if !sample.data.all_finite() {
        return Err(Error::InvalidInput("sample contains non-finite values".into()));
    }
    let noise_power = sample.mean_power() / 10f64.powf(snr_db / 10.0);
    let std = (noise_power / 2.0).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = rng_from(noise_seed, TAG_NOISE, 0);
    let mut noisy = sample.clone();
    for v in noisy.data.data_mut() {
        *v = to_f32_grid(*v + normal.sample(&mut rng));
    }
    Ok(noisy)
}

/// Per-index standard deviation of magnitude for one sample, along the
/// subcarrier (`axis = 0`) or time (`axis = 1`) axis.
pub fn magnitude_std_profile(sample: &CsiSample, axis: usize) -> Vec<f64> {
    let (c_n, t_n, s_n) = (sample.subcarriers(), sample.frames(), sample.streams());
    let mags = sample.magnitudes();
    let n = if axis == 0 { c_n } else { t_n };
    let mut groups = vec![Vec::new(); n];
    for c in 0..c_n {
        for t in 0..t_n {
            for s in 0..s_n {
                let idx = if axis == 0 { c } else { t };
                groups[idx].push(mags[(c * t_n + t) * s_n + s]);
            }
        }
    }
    groups.iter().map(|g| std_dev(g)).collect()
}

/// Population standard deviation. Values are shifted by the first entry
/// before averaging, so a constant series gives exactly 0.
pub fn std_dev(values: &[f64]) -> f64 {
    let Some(&pivot) = values.first() else {
        return 0.0;
    };
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v - pivot).sum::<f64>() / n;
    (values.iter().map(|v| (v - pivot - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-subcarrier temporal standard deviation of magnitude, averaged over
/// streams. Restricting to `frames` (when given) keeps only those frames.
pub fn temporal_std_features(sample: &CsiSample, frames: Option<&[bool]>) -> Vec<f64> {
    let (c_n, t_n, s_n) = (sample.subcarriers(), sample.frames(), sample.streams());
    let mags = sample.magnitudes();
    (0..c_n)
        .map(|c| {
            (0..s_n)
                .map(|s| {
                    let series: Vec<f64> = (0..t_n)
                        .filter(|&t| frames.is_none_or(|m| m[t]))
                        .map(|t| mags[(c * t_n + t) * s_n + s])
                        .collect();
                    std_dev(&series)
                })
                .sum::<f64>()
                / s_n as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig::default()
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = small();
        let a = generate_sample(&cfg, 2, 17).unwrap();
        let b = generate_sample(&cfg, 2, 17).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&cfg, 2, 18).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn default_masks_nine_subcarriers() {
        let cfg = small();
        for class in 0..cfg.classes {
            let s = generate_sample(&cfg, class, 3).unwrap();
            let mask = s.subcarrier_mask.unwrap();
            assert_eq!(mask.len(), 30);
            assert_eq!(mask.iter().filter(|&&m| m).count(), 9);
        }
    }

    #[test]
    fn time_mask_is_one_contiguous_run() {
        let cfg = small();
        for seed in 0..20 {
            let tm = generate_sample(&cfg, 0, seed).unwrap().time_mask.unwrap();
            let rises = tm.windows(2).filter(|w| !w[0] && w[1]).count() + usize::from(tm[0]);
            assert_eq!(rises, 1);
            assert_eq!(tm.iter().filter(|&&m| m).count(), cfg.window_len());
        }
    }

    #[test]
    fn unmasked_subcarriers_have_constant_magnitude() {
        let cfg = small();
        let s = generate_sample(&cfg, 1, 5).unwrap();
        let feats = temporal_std_features(&s, None);
        let mask = s.subcarrier_mask.as_ref().unwrap();
        for (c, &m) in mask.iter().enumerate() {
            if !m {
                assert_eq!(feats[c], 0.0, "subcarrier {c}");
            }
        }
    }

    #[test]
    fn masked_subcarriers_vary_more_than_any_unmasked() {
        let cfg = small();
        for seed in 0..25 {
            let s = generate_sample(&cfg, (seed % 5) as usize, seed).unwrap();
            let mask = s.subcarrier_mask.as_ref().unwrap();
            let feats = temporal_std_features(&s, None);
            let max_unmasked = (0..30).filter(|&c| !mask[c]).map(|c| feats[c]).fold(0.0, f64::max);
            for c in (0..30).filter(|&c| mask[c]) {
                assert!(feats[c] > max_unmasked, "seed {seed} subcarrier {c}");
            }
        }
    }

    #[test]
    fn class_masks_come_from_the_sensitive_band() {
        let cfg = small();
        let band = cfg.sensitive_band();
        assert_eq!(band.len(), 15);
        for class in 0..cfg.classes {
            let mask = cfg.class_mask(class);
            for (c, &m) in mask.iter().enumerate() {
                assert!(!m || band.contains(&c));
            }
        }
    }

    #[test]
    fn invalid_class_is_rejected() {
        assert!(generate_sample(&small(), 5, 0).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = small();
        cfg.doppler = vec![1.0, 1.0, 2.0, 3.0, 4.0];
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "synth.doppler"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = small();
        cfg.window_fraction = 0.01;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "synth.window_fraction"));
    }

    #[test]
    fn noise_none_is_identity() {
        let s = generate_sample(&small(), 0, 1).unwrap();
        let n = inject_noise(&s, None, 3).unwrap();
        assert_eq!(
            s.data.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            n.data.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn noise_is_seeded_and_keeps_masks() {
        let s = generate_sample(&small(), 0, 1).unwrap();
        let a = inject_noise(&s, Some(10.0), 3).unwrap();
        let b = inject_noise(&s, Some(10.0), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.subcarrier_mask, s.subcarrier_mask);
        assert_eq!(a.time_mask, s.time_mask);
        assert_eq!(a.data.shape(), s.data.shape());
        assert!(inject_noise(&s, Some(f64::NAN), 3).is_err());
    }

    #[test]
    fn measured_snr_matches_target() {
        let s = generate_sample(&small(), 3, 2).unwrap();
        assert_eq!(s.data.len() / 2, 9000);
        for (snr, seed) in [(10.0, 1), (10.0, 2), (0.0, 3), (25.0, 4)] {
            let noisy = inject_noise(&s, Some(snr), seed).unwrap();
            let noise_power = noisy
                .data
                .data()
                .iter()
                .zip(s.data.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / 9000.0;
            let measured = 10.0 * (s.mean_power() / noise_power).log10();
            assert!((measured - snr).abs() < 0.5, "target {snr}, measured {measured}");
        }
    }
}
