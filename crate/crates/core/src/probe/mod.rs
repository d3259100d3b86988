//! Structural probes: a rank-`r` linear map `B` under which squared
//! distances between standardized word vectors approximate tree distances.

mod eval;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};
use crate::store::{write_bytes_atomic, ActivationStore, CorpusStats};
use crate::udtree::{gold_distance_matrix, DistanceMatrix, ParsedSentence};

pub use eval::{eval_distance_matrices, eval_probe, minimum_spanning_tree, spearman, ProbeQuality};
pub use train::{train_probe, EpochRecord, StopReason, TrainingLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub rank: usize,
    pub learning_rate: f64,
    /// Sentences per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub decay_factor: f64,
    pub patience: usize,
    pub max_resets: usize,
    /// Relative dev-loss improvement needed to reset patience.
    pub improvement_threshold: f64,
    /// Share of training sentences held out when no dev set is given.
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            decay_factor: 0.1,
            patience: 1,
            max_resets: 4,
            improvement_threshold: 1e-4,
            dev_fraction: 0.05,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.rank == 0 || self.rank > dim {
            return Err(Error::Probe(format!("rank {} must lie in 1..={dim}", self.rank)));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("decay_factor", self.decay_factor),
            ("dev_fraction", self.dev_fraction),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Probe(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Probe("batch_size and max_epochs must be positive".into()));
        }
        if self.improvement_threshold.is_nan() || self.improvement_threshold < 0.0 {
            return Err(Error::Probe("improvement_threshold must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One training or evaluation sentence: raw (unstandardized) word vectors
/// and the gold distance matrix over the same words.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSentence {
    pub vectors: Vec<Vec<f64>>,
    pub gold: DistanceMatrix,
}

impl ProbeSentence {
    pub fn new(vectors: Vec<Vec<f64>>, gold: DistanceMatrix) -> Result<Self> {
        if vectors.len() != gold.len() {
            return Err(Error::Dimension(format!(
                "{} word vectors for a {}-word tree",
                vectors.len(),
                gold.len()
            )));
        }
        Ok(Self { vectors, gold })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// A trained probe for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMatrix {
    pub layer: usize,
    pub rank: usize,
    pub dim: usize,
    /// Row-major `rank × dim`.
    pub b: Vec<f64>,
    pub corpus_stats: CorpusStats,
    pub training_log: TrainingLog,
}

impl ProbeMatrix {
    /// Wraps an explicit matrix. Used for fixed probes and tests.
    pub fn from_matrix(layer: usize, rank: usize, dim: usize, b: Vec<f64>, corpus_stats: CorpusStats) -> Result<Self> {
        if b.len() != rank * dim {
            return Err(Error::Dimension(format!(
                "{} entries for a {rank}×{dim} probe",
                b.len()
            )));
        }
        if corpus_stats.dim() != dim {
            return Err(Error::Dimension(format!(
                "corpus stats have dimension {}, probe has {dim}",
                corpus_stats.dim()
            )));
        }
        if b.iter().any(|x| !x.is_finite()) {
            return Err(Error::Probe("probe matrix has non-finite entries".into()));
        }
        Ok(Self {
            layer,
            rank,
            dim,
            b,
            corpus_stats,
            training_log: TrainingLog::default(),
        })
    }

    /// `B x` for a standardized vector.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.b
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Probe distance between two raw word vectors: standardize with the
    /// training statistics, then `‖B(u − v)‖²`.
    pub fn distance_raw(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        let su = self.corpus_stats.apply(u)?;
        let sv = self.corpus_stats.apply(v)?;
        probe_distance(self, &su, &sv)
    }

    /// Mean per-sentence L1 loss, the quantity the trainer minimizes.
    pub fn loss(&self, sentences: &[ProbeSentence]) -> Result<f64> {
        let prepared = train::prepare(sentences, &self.corpus_stats)?;
        if prepared.is_empty() {
            return Ok(0.0);
        }
        let refs: Vec<_> = prepared.iter().collect();
        Ok(train::batch_loss(&self.b, self.rank, self.dim, &refs))
    }

    /// Pairwise predicted distances over a sentence's words, row-major.
    pub fn distance_matrix(&self, vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
        let projected = vectors
            .iter()
            .map(|v| Ok(self.project(&self.corpus_stats.apply(v)?)))
            .collect::<Result<Vec<_>>>()?;
        let n = vectors.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d: f64 = projected[i]
                    .iter()
                    .zip(&projected[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        Ok(out)
    }
}

/// Pairs gold parses with their pooled word vectors at `layer`. Parses are
/// looked up in the store by stimulus key or `sent_id`; the store's word
/// count must equal the parse's token count.
pub fn sentences_from_store(
    parses: &[ParsedSentence],
    store: &ActivationStore,
    layer: usize,
) -> Result<Vec<ProbeSentence>> {
    parses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let key = p
                .lookup_key()
                .ok_or_else(|| Error::Probe(format!("parse #{i} has neither a stimulus key nor a sent_id")))?;
            let acts = store.layer_activations(layer, &key)?;
            if acts.vectors.len() != p.len() {
                return Err(Error::Alignment(format!(
                    "`{key}`: store has {} words, parse has {} tokens",
                    acts.vectors.len(),
                    p.len()
                )));
            }
            ProbeSentence::new(acts.vectors, gold_distance_matrix(p))
        })
        .collect()
}

/// `‖B(u − v)‖²` for vectors already standardized with the probe's stats.
pub fn probe_distance(probe: &ProbeMatrix, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != probe.dim || v.len() != probe.dim {
        return Err(Error::Dimension(format!(
            "probe expects dimension {}, got {} and {}",
            probe.dim,
            u.len(),
            v.len()
        )));
    }
    let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    Ok(probe.project(&diff).iter().map(|x| x * x).sum())
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeHeader {
    layer: usize,
    rank: usize,
    dim: usize,
    dtype: String,
    endianness: String,
    matrix_file: String,
    matrix_crc32: u32,
    final_train_loss: Option<f64>,
    best_dev_loss: Option<f64>,
    corpus_stats: CorpusStats,
    training_log: TrainingLog,
}

pub fn probe_file_stem(layer: usize) -> String {
    format!("layer_{layer}")
}

/// Writes `<dir>/layer_<k>.json` (header) and `<dir>/layer_<k>.f32` (B as
/// little-endian float32, row-major). Returns the header path.
pub fn save_probe(dir: &Path, probe: &ProbeMatrix) -> Result<PathBuf> {
    let stem = probe_file_stem(probe.layer);
    let mut bytes = Vec::with_capacity(probe.b.len() * 4);
    for &x in &probe.b {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let matrix_file = format!("{stem}.f32");
    write_bytes_atomic(&dir.join(&matrix_file), &bytes)?;
    let header = ProbeHeader {
        layer: probe.layer,
        rank: probe.rank,
        dim: probe.dim,
        dtype: "float32".into(),
        endianness: "little".into(),
        matrix_file,
        matrix_crc32: crc32fast::hash(&bytes),
        final_train_loss: probe.training_log.epochs.last().map(|e| e.train_loss),
        best_dev_loss: probe.training_log.epochs.last().map(|e| e.best_dev_loss),
        corpus_stats: probe.corpus_stats.clone(),
        training_log: probe.training_log.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_vec_pretty(&header)?;
    text.push(b'\n');
    write_bytes_atomic(&path, &text)?;
    Ok(path)
}

pub fn load_probe(dir: &Path, layer: usize) -> Result<ProbeMatrix> {
    let path = dir.join(format!("{}.json", probe_file_stem(layer)));
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    let header: ProbeHeader = serde_json::from_str(&text)?;
    if header.layer != layer {
        return Err(Error::Probe(format!("{} holds layer {}", path.display(), header.layer)));
    }
    let mpath = dir.join(&header.matrix_file);
    let bytes = fs::read(&mpath).map_err(io_at(&mpath))?;
    let actual = crc32fast::hash(&bytes);
    if actual != header.matrix_crc32 {
        return Err(Error::Checksum {
            file: mpath,
            expected: header.matrix_crc32,
            actual,
        });
    }
    if bytes.len() != header.rank * header.dim * 4 {
        return Err(Error::Dimension(format!(
            "{}: {} bytes for a {}×{} probe",
            mpath.display(),
            bytes.len(),
            header.rank,
            header.dim
        )));
    }
    let b = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let mut probe = ProbeMatrix::from_matrix(layer, header.rank, header.dim, b, header.corpus_stats)?;
    probe.training_log = header.training_log;
    Ok(probe)
}
