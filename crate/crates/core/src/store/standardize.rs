use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations below this are clamped to it.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension mean and population standard deviation of one layer's
/// training vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions whose std was clamped to [`STD_FLOOR`].
    pub clamped: Vec<usize>,
}

impl CorpusStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / std`, component-wise.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        apply_standardizer(self, x)
    }
}

pub fn fit_standardizer(layer: usize, vectors: &[Vec<f64>]) -> Result<CorpusStats> {
    if vectors.len() < 2 {
        return Err(Error::TooFewVectors(vectors.len()));
    }
    let d = vectors[0].len();
    if let Some(bad) = vectors.iter().position(|v| v.len() != d) {
        return Err(Error::Dimension(format!(
            "training vector {bad} has dimension {} instead of {d}",
            vectors[bad].len()
        )));
    }
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    // constant columns get their exact value so they map to zero
    for (k, m) in mean.iter_mut().enumerate() {
        let first = vectors[0][k];
        if vectors.iter().all(|v| v[k] == first) {
            *m = first;
        }
    }
    let mut var = vec![0.0; d];
    for v in vectors {
        for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let mut clamped = Vec::new();
    let std = var
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let sd = (s / n).sqrt();
            if sd < STD_FLOOR {
                clamped.push(k);
                STD_FLOOR
            } else {
                sd
            }
        })
        .collect();
    if !clamped.is_empty() {
        log::debug!("layer {layer}: clamped std of {} dimension(s)", clamped.len());
    }
    Ok(CorpusStats {
        layer,
        mean,
        std,
        clamped,
    })
}

pub fn apply_standardizer(stats: &CorpusStats, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != stats.dim() {
        return Err(Error::Dimension(format!(
            "vector has dimension {} but layer {} stats have {}",
            x.len(),
            stats.layer,
            stats.dim()
        )));
    }
    Ok(x.iter()
        .zip(&stats.mean)
        .zip(&stats.std)
        .map(|((x, m), s)| (x - m) / s)
        .collect())
}
