use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ProbeConfig, ProbeMatrix, ProbeSentence};
use crate::error::{Error, Result};
use crate::store::{fit_standardizer, CorpusStats};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Sentences per gradient partial sum; fixed so results do not depend on
/// the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    ResetsExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub best_dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub optimizer: String,
    pub weight_decay: f64,
    pub gradient_clipping: Option<f64>,
    pub n_train: usize,
    pub n_dev: usize,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: Option<StopReason>,
}

impl Default for TrainingLog {
    fn default() -> Self {
        Self {
            optimizer: format!("adam(beta1={ADAM_BETA1}, beta2={ADAM_BETA2}, eps={ADAM_EPS})"),
            weight_decay: 0.0,
            gradient_clipping: None,
            n_train: 0,
            n_dev: 0,
            epochs: Vec::new(),
            stop_reason: None,
        }
    }
}

/// Standardized sentence with flattened storage.
pub(crate) struct Prepared {
    n: usize,
    /// `[n × d]`
    h: Vec<f64>,
    /// `[n × n]`
    gold: Vec<f64>,
}

pub(crate) fn prepare(sentences: &[ProbeSentence], stats: &CorpusStats) -> Result<Vec<Prepared>> {
    sentences
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let n = s.len();
            let mut h = Vec::with_capacity(n * stats.dim());
            for v in &s.vectors {
                h.extend(stats.apply(v)?);
            }
            let mut gold = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    gold.push(f64::from(s.gold.get(i, j)));
                }
            }
            Ok(Prepared { n, h, gold })
        })
        .collect()
}

fn project_all(b: &[f64], rank: usize, dim: usize, s: &Prepared) -> Vec<f64> {
    let mut p = vec![0.0; s.n * rank];
    for w in 0..s.n {
        let h = &s.h[w * dim..(w + 1) * dim];
        for k in 0..rank {
            let row = &b[k * dim..(k + 1) * dim];
            p[w * rank + k] = row.iter().zip(h).map(|(x, y)| x * y).sum();
        }
    }
    p
}

/// Mean over the sentence's unordered pairs of `|d_B − gold|`, plus the
/// signed residual coefficients when `with_grad` is set.
fn sentence_loss(p: &[f64], rank: usize, s: &Prepared, coeff: Option<&mut Vec<f64>>) -> f64 {
    let n = s.n;
    let pairs = (n * (n - 1) / 2) as f64;
    let mut total = 0.0;
    let mut signs = coeff;
    if let Some(c) = signs.as_deref_mut() {
        c.clear();
        c.resize(n * n, 0.0);
    }
    for u in 0..n {
        for v in u + 1..n {
            let pu = &p[u * rank..(u + 1) * rank];
            let pv = &p[v * rank..(v + 1) * rank];
            let dist: f64 = pu.iter().zip(pv).map(|(a, b)| (a - b) * (a - b)).sum();
            let res = dist - s.gold[u * n + v];
            total += res.abs();
            if let Some(c) = signs.as_deref_mut() {
                let sg = if res > 0.0 {
                    1.0
                } else if res < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                c[u * n + v] = sg;
                c[v * n + u] = sg;
            }
        }
    }
    total / pairs
}

/// Adds `scale · ∂loss/∂B` for one sentence into `grad`.
///
/// With `c_uv` the residual signs, `Σ_{u<v} c_uv (p_u − p_v)(h_u − h_v)ᵀ`
/// equals `Pᵀ L H` where `L` is the Laplacian of `c`; the pair loss gradient
/// is twice that.
fn accumulate_grad(grad: &mut [f64], p: &[f64], c: &[f64], rank: usize, dim: usize, s: &Prepared, scale: f64) {
    let n = s.n;
    let mut lh = vec![0.0; n * dim];
    for u in 0..n {
        let row = &mut lh[u * dim..(u + 1) * dim];
        for v in 0..n {
            let cuv = c[u * n + v];
            if cuv == 0.0 {
                continue;
            }
            let hu = &s.h[u * dim..(u + 1) * dim];
            let hv = &s.h[v * dim..(v + 1) * dim];
            for ((r, a), b) in row.iter_mut().zip(hu).zip(hv) {
                *r += cuv * (a - b);
            }
        }
    }
    for u in 0..n {
        let lrow = &lh[u * dim..(u + 1) * dim];
        for k in 0..rank {
            let f = 2.0 * scale * p[u * rank + k];
            if f == 0.0 {
                continue;
            }
            for (g, l) in grad[k * dim..(k + 1) * dim].iter_mut().zip(lrow) {
                *g += f * l;
            }
        }
    }
}

/// Mean sentence loss of a batch.
pub(crate) fn batch_loss(b: &[f64], rank: usize, dim: usize, batch: &[&Prepared]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|s| sentence_loss(&project_all(b, rank, dim, s), rank, s, None))
        .sum();
    total / batch.len() as f64
}

/// Mean sentence loss of a batch and its gradient with respect to `B`.
pub(crate) fn batch_loss_and_grad(b: &[f64], rank: usize, dim: usize, batch: &[&Prepared]) -> (f64, Vec<f64>) {
    let scale = 1.0 / batch.len() as f64;
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; rank * dim];
            let mut loss = 0.0;
            let mut c = Vec::new();
            for s in chunk {
                let p = project_all(b, rank, dim, s);
                let l = sentence_loss(&p, rank, s, Some(&mut c));
                let pairs = (s.n * (s.n - 1) / 2) as f64;
                accumulate_grad(&mut grad, &p, &c, rank, dim, s, scale / pairs);
                loss += l;
            }
            (loss, grad)
        })
        .collect();
    let mut grad = vec![0.0; rank * dim];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (loss * scale, grad)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

fn split_dev(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(rng);
    let n_dev = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
    let dev = idx[..n_dev].to_vec();
    let mut train = idx[n_dev..].to_vec();
    train.sort_unstable();
    (train, dev)
}

/// Trains the probe for one layer.
///
/// Word vectors are standardized with statistics fitted on the training
/// sentences. Each epoch shuffles the training set, takes Adam steps on the
/// batch-mean L1 loss and evaluates the dev loss; a dev loss that fails to
/// improve by `improvement_threshold` (relative) for `patience` epochs
/// multiplies the learning rate by `decay_factor`, and the plateau after the
/// last allowed decay stops training. The returned matrix is the one with
/// the best dev loss, rounded to float32.
pub fn train_probe(
    layer: usize,
    train: &[ProbeSentence],
    dev: Option<&[ProbeSentence]>,
    config: &ProbeConfig,
) -> Result<ProbeMatrix> {
    let usable: Vec<&ProbeSentence> = train.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Probe(format!(
            "layer {layer}: no training sentence has at least 2 words"
        )));
    }
    let dim = usable[0].vectors[0].len();
    config.validate(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let (train_set, dev_set): (Vec<ProbeSentence>, Vec<ProbeSentence>) = match dev {
        Some(d) => (usable.iter().map(|s| (*s).clone()).collect(), d.to_vec()),
        None => {
            let (tr, dv) = split_dev(usable.len(), config.dev_fraction, &mut rng);
            (
                tr.iter().map(|&i| usable[i].clone()).collect(),
                dv.iter().map(|&i| usable[i].clone()).collect(),
            )
        }
    };
    let all_vectors: Vec<Vec<f64>> = train_set.iter().flat_map(|s| s.vectors.iter().cloned()).collect();
    if let Some(bad) = all_vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::Dimension(format!(
            "layer {layer}: word vector of dimension {} among dimension-{dim} vectors",
            bad.len()
        )));
    }
    let stats = fit_standardizer(layer, &all_vectors)?;
    let train_p = prepare(&train_set, &stats)?;
    let dev_p = prepare(&dev_set, &stats)?;
    let dev_refs: Vec<&Prepared> = if dev_p.is_empty() {
        train_p.iter().collect()
    } else {
        dev_p.iter().collect()
    };

    let rank = config.rank;
    let bound = 1.0 / (dim as f64).sqrt();
    let mut b: Vec<f64> = (0..rank * dim).map(|_| rng.random_range(-bound..=bound)).collect();
    let mut adam = Adam::new(b.len());
    let mut lr = config.learning_rate;
    let mut best_b = b.clone();
    let mut best_dev = batch_loss(&b, rank, dim, &dev_refs);
    let mut bad_epochs = 0;
    let mut resets = 0;
    let mut log = TrainingLog {
        n_train: train_p.len(),
        n_dev: dev_refs.len(),
        ..TrainingLog::default()
    };
    let mut order: Vec<usize> = (0..train_p.len()).collect();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_p[i]).collect();
            let (loss, grad) = batch_loss_and_grad(&b, rank, dim, &batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, lr });
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut b, &grad, lr);
        }
        let train_loss = epoch_loss / train_p.len() as f64;
        let dev_loss = batch_loss(&b, rank, dim, &dev_refs);
        if !dev_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                lr,
            });
        }
        let improved = dev_loss < best_dev * (1.0 - config.improvement_threshold);
        if dev_loss < best_dev {
            best_dev = dev_loss;
            best_b.copy_from_slice(&b);
        }
        log.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            dev_loss,
            best_dev_loss: best_dev,
        });
        log::debug!("layer {layer} epoch {epoch}: train {train_loss:.5} dev {dev_loss:.5} lr {lr:e}");
        if improved {
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                if resets >= config.max_resets {
                    log.stop_reason = Some(StopReason::ResetsExhausted);
                    break;
                }
                lr *= config.decay_factor;
                resets += 1;
                bad_epochs = 0;
            }
        }
    }
    if log.stop_reason.is_none() {
        log.stop_reason = Some(StopReason::MaxEpochs);
    }
    let b32: Vec<f64> = best_b.iter().map(|&x| f64::from(x as f32)).collect();
    let mut probe = ProbeMatrix::from_matrix(layer, rank, dim, b32, stats)?;
    probe.training_log = log;
    Ok(probe)
}
