//! Nearest-centroid reference classifier on hand-built magnitude features.

use crate::error::{Error, Result};
use crate::synth::{temporal_std_features, CsiSample};

/// Which frames the per-subcarrier magnitude std is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureWindow {
    AllFrames,
    /// Only frames inside the sample's ground-truth time mask.
    GroundTruth,
}

pub fn oracle_features(sample: &CsiSample, window: FeatureWindow) -> Result<Vec<f64>> {
    match window {
        FeatureWindow::AllFrames => Ok(temporal_std_features(sample, None)),
        FeatureWindow::GroundTruth => {
            let mask = sample
                .time_mask
                .as_deref()
                .ok_or_else(|| Error::InvalidInput("sample has no time mask".into()))?;
            Ok(temporal_std_features(sample, Some(mask)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestCentroid {
    centroids: Vec<Option<Vec<f64>>>,
}

impl NearestCentroid {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::InvalidInput("need one label per feature vector".into()));
        }
        let dim = features[0].len();
        let mut sums = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for (f, &y) in features.iter().zip(labels) {
            if y >= classes || f.len() != dim {
                return Err(Error::InvalidInput("label or feature length out of range".into()));
            }
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(f) {
                *s += v;
            }
        }
        let centroids = sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Ok(Self { centroids })
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in self.centroids.iter().enumerate() {
            if let Some(c) = c {
                let d: f64 = c.iter().zip(feature).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        best.1
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(f, &y)| self.predict(f) == y).count();
        hits as f64 / labels.len().max(1) as f64
    }
}
