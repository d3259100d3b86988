//! Synthetic "models" with known geometry, for tests, acceptance runs and
//! dry runs of the CLI.
//!
//! Every word lives in a `k`-dimensional subspace `S` where squared
//! Euclidean distance equals dependency-tree distance: each edge contributes
//! an orthonormal direction from the dependent to its head. The remaining
//! `d − k` coordinates are nuisance noise. Each layer applies its own random
//! rotation of the full space, so a probe has to find `S` per layer.
//!
//! Stimuli follow the UD trees of the three conditions with edge directions
//! keyed by the dependent's role, so the unperturbed geometry is identical
//! across conditions. At layers with plant strength `λ > 0` the finite and
//! infinitival stimuli are perturbed so that, relative to bare, the squared
//! distances change by
//!
//! | pair      | finite  | infinitival |
//! |-----------|---------|-------------|
//! | wh–esubj  | +0.5 λ  | +0.2 λ      |
//! | esubj–evb | −0.3 λ  | +0.3 λ      |
//!
//! Finite: the wh word moves along a fresh direction (`+0.8 λ`) and the
//! subject's edge shrinks (`−0.3 λ` on both pairs). Infinitival: the subject
//! moves along one fresh direction (`+0.2 λ`) and the verb along another
//! (`+0.1 λ` on esubj–evb only).

use std::ops::RangeInclusive;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::effects::derive_seed;
use crate::error::{Error, Result};
use crate::labels::Condition;
use crate::patchlab::PatchPlan;
use crate::probe::ProbeMatrix;
use crate::stimgen::Stimulus;
use crate::store::{ActivationStore, CorpusStats, WordSpan};
use crate::udtree::ParsedSentence;

// Basis directions of S, by dependent role.
const DIR_WH: usize = 0;
const DIR_AUX: usize = 1;
const DIR_MSUBJ: usize = 2;
const DIR_ESUBJ: usize = 3;
const DIR_MARK: usize = 4;
const DIR_EVB: usize = 5;
const DIR_PUNCT: usize = 6;
const DIR_PLANT_WH: usize = 7;
const DIR_PLANT_ESUBJ: usize = 8;
const DIR_PLANT_EVB: usize = 9;
/// Smallest subspace that holds all stimulus and plant directions.
pub const MIN_SUBSPACE: usize = 10;

/// Half-gap between the two subword rows of a split word.
const SUBWORD_SPREAD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub model_id: String,
    pub d: usize,
    /// Dimension of the tree-metric subspace.
    pub k: usize,
    /// Plant strength per layer; its length is the layer count.
    pub plant: Vec<f64>,
    /// Per-coordinate standard deviation of word noise inside the subspace.
    pub noise: f64,
    /// Standard deviation of the out-of-subspace coordinates.
    pub nuisance: f64,
    /// Split some stimulus words into two subword tokens.
    pub split_words: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            model_id: "synthetic".into(),
            d: 32,
            k: 16,
            plant: vec![0.0, 0.6, 1.0, 0.8, 0.0, 0.0],
            noise: 0.02,
            nuisance: 1.0,
            split_words: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_layers(&self) -> usize {
        self.plant.len()
    }

    /// Layers with a nonzero plant.
    pub fn planted_layers(&self) -> Vec<usize> {
        (0..self.plant.len()).filter(|&l| self.plant[l] != 0.0).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.k < MIN_SUBSPACE || self.k > self.d {
            return Err(Error::Dimension(format!(
                "subspace dimension {} must lie in {MIN_SUBSPACE}..={}",
                self.k, self.d
            )));
        }
        if self.plant.is_empty() {
            return Err(Error::Dimension("synthetic model needs at least one layer".into()));
        }
        if let Some(l) = self.plant.iter().position(|&x| !(0.0..=3.0).contains(&x)) {
            // the finite edge shrink needs 1 − 0.3 λ ≥ 0
            return Err(Error::Dimension(format!(
                "plant strength {} at layer {l} outside [0, 3]",
                self.plant[l]
            )));
        }
        Ok(())
    }
}

pub struct SyntheticModel {
    spec: SyntheticSpec,
    /// One `d × d` orthogonal matrix per layer.
    rotations: Vec<DMatrix<f64>>,
}

fn rng_for(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl SyntheticModel {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d;
        let rotations = (0..spec.n_layers())
            .map(|l| {
                let mut rng = rng_for(spec.seed, &[&spec.model_id, "rotation", &l.to_string()]);
                DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal))
                    .qr()
                    .q()
            })
            .collect();
        Ok(Self { spec, rotations })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Maps subspace coordinates plus nuisance into the layer's space.
    fn embed(&self, layer: usize, s: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (d, k) = (self.spec.d, self.spec.k);
        let mut full = Vec::with_capacity(d);
        full.extend(s.iter().zip(gaussian(rng, k, self.spec.noise)).map(|(a, b)| a + b));
        full.extend(gaussian(rng, d - k, self.spec.nuisance));
        let q = &self.rotations[layer];
        (0..d).map(|i| (0..d).map(|j| q[(i, j)] * full[j]).sum()).collect()
    }

    /// The probe that reads off the subspace exactly: `B = [I_k 0] Qᵀ` with
    /// identity standardization.
    pub fn oracle_probe(&self, layer: usize) -> Result<ProbeMatrix> {
        let (d, k) = (self.spec.d, self.spec.k);
        let q = self
            .rotations
            .get(layer)
            .ok_or_else(|| Error::Probe(format!("no layer {layer}")))?;
        let mut b = Vec::with_capacity(k * d);
        for row in 0..k {
            for col in 0..d {
                b.push(q[(col, row)]);
            }
        }
        let stats = CorpusStats {
            layer,
            mean: vec![0.0; d],
            std: vec![1.0; d],
            clamped: vec![],
        };
        ProbeMatrix::from_matrix(layer, k, d, b, stats)
    }

    /// Random trees embedded as exact tree metrics in the subspace, with
    /// their gold parses. Sentence keys are `sent-<n>`.
    pub fn corpus(
        &self,
        n_sentences: usize,
        lengths: RangeInclusive<usize>,
        seed: u64,
    ) -> Result<(Vec<ParsedSentence>, ActivationStore)> {
        let k = self.spec.k;
        if *lengths.start() < 1 || *lengths.end() > k + 1 || lengths.is_empty() {
            return Err(Error::Dimension(format!(
                "sentence lengths {lengths:?} must lie in 1..={} for a {k}-dim subspace",
                k + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&self.spec.model_id, "corpus"]));
        let mut parses = Vec::with_capacity(n_sentences);
        let mut store = ActivationStore::new(&self.spec.model_id, self.spec.d, self.spec.n_layers());
        let forms: Vec<String> = (1..=k + 1).map(|i| format!("w{i}")).collect();
        for s in 0..n_sentences {
            let n = rng.random_range(lengths.clone());
            let mut heads = vec![0usize; n];
            let root = rng.random_range(0..n);
            // random recursive tree over a shuffled order, rooted at `root`
            let mut order: Vec<usize> = (0..n).filter(|&i| i != root).collect();
            order.shuffle(&mut rng);
            let mut placed = vec![root];
            for &w in &order {
                heads[w] = placed[rng.random_range(0..placed.len())] + 1;
                placed.push(w);
            }
            let mut dirs: Vec<usize> = (0..k).collect();
            dirs.shuffle(&mut rng);

            let offset = gaussian(&mut rng, k, 1.0);
            let mut pos: Vec<Option<Vec<f64>>> = vec![None; n];
            pos[root] = Some(offset);
            for (edge, &w) in placed.iter().skip(1).enumerate() {
                let mut v = pos[heads[w] - 1].clone().expect("parents are placed first");
                v[dirs[edge]] += 1.0;
                pos[w] = Some(v);
            }
            let key = format!("sent-{s:05}");
            let mut parse = ParsedSentence::from_heads(
                None,
                (0..n).map(|i| (forms[i].as_str(), heads[i], if heads[i] == 0 { "root" } else { "dep" })),
            )?;
            parse.sent_id = Some(key.clone());
            parses.push(parse);

            let layers = (0..self.spec.n_layers())
                .map(|l| {
                    pos.iter()
                        .flat_map(|p| self.embed(l, p.as_ref().unwrap(), &mut rng))
                        .map(|x| x as f32)
                        .collect()
                })
                .collect();
            store.push(key, (0..n as u32).map(|i| WordSpan::new(i, 1)).collect(), layers)?;
        }
        Ok((parses, store))
    }

    /// Subspace coordinates of each word of `stimulus` at plant strength
    /// `lambda`, before noise.
    fn stimulus_geometry(&self, stimulus: &Stimulus, offset: &[f64], lambda: f64) -> Vec<Vec<f64>> {
        let parse = reference_parse(stimulus);
        let p = stimulus.positions;
        let unit = |dir: usize, scale: f64| {
            let mut v = vec![0.0; self.spec.k];
            v[dir] = scale;
            v
        };
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
        let finite = stimulus.condition == Condition::Finite;
        let esubj_edge = if finite { (1.0 - 0.3 * lambda).sqrt() } else { 1.0 };

        let n = parse.len();
        let mut pos: Vec<Option<Vec<f64>>> = vec![None; n];
        // heads precede dependents along the root → leaf walk; resolve lazily
        fn place(
            i: usize,
            parse: &ParsedSentence,
            pos: &mut Vec<Option<Vec<f64>>>,
            edge: &dyn Fn(usize) -> Vec<f64>,
            offset: &[f64],
        ) -> Vec<f64> {
            if let Some(v) = &pos[i] {
                return v.clone();
            }
            let head = parse.tokens[i].head;
            let v = if head == 0 {
                offset.to_vec()
            } else {
                let h = place(head - 1, parse, pos, edge, offset);
                h.iter().zip(edge(i)).map(|(a, b)| a + b).collect()
            };
            pos[i] = Some(v.clone());
            v
        }
        let edge = |i: usize| -> Vec<f64> {
            let dir = match i {
                0 => DIR_WH,
                1 => DIR_AUX,
                2 => DIR_MSUBJ,
                _ if i == p.embedded_subject => return unit(DIR_ESUBJ, esubj_edge),
                _ if i == p.embedded_verb => DIR_EVB,
                _ if i == n - 1 => DIR_PUNCT,
                _ => DIR_MARK,
            };
            unit(dir, 1.0)
        };
        let mut words: Vec<Vec<f64>> = (0..n).map(|i| place(i, &parse, &mut pos, &edge, offset)).collect();
        match stimulus.condition {
            Condition::Finite => {
                words[p.wh] = add(&words[p.wh], &unit(DIR_PLANT_WH, (0.8 * lambda).sqrt()));
            }
            Condition::Infinitival => {
                let e = p.embedded_subject;
                words[e] = add(&words[e], &unit(DIR_PLANT_ESUBJ, (0.2 * lambda).sqrt()));
                let v = p.embedded_verb;
                words[v] = add(&words[v], &unit(DIR_PLANT_EVB, (0.1 * lambda).sqrt()));
            }
            Condition::Bare => {}
        }
        words
    }

    /// Activation store for a stimulus set. Vectors depend only on the
    /// stimulus, not on its position in the set.
    pub fn stimulus_store(&self, stimuli: &[Stimulus]) -> Result<ActivationStore> {
        let spec = &self.spec;
        let mut store = ActivationStore::new(&spec.model_id, spec.d, spec.n_layers());
        store.set_metadata("generator", "synthetic");
        for s in stimuli {
            let key = s.key().to_string();
            let offset = gaussian(
                &mut rng_for(spec.seed, &[&spec.model_id, "item", &s.item_id.to_string()]),
                spec.k,
                1.0,
            );
            let mut rng = rng_for(spec.seed, &[&spec.model_id, "stimulus", &key]);
            let n_words = s.tokens().len();
            let split: Vec<bool> = (0..n_words)
                .map(|w| {
                    spec.split_words
                        && w != s.positions.embedded_subject
                        && w != s.positions.wh
                        && w + 1 != n_words
                        && (s.item_id as usize + w).is_multiple_of(3)
                })
                .collect();
            let mut spans = Vec::with_capacity(n_words);
            let mut next = 0u32;
            for &sp in &split {
                let c = if sp { 2 } else { 1 };
                spans.push(WordSpan::new(next, c));
                next += c;
            }
            let mut layers = Vec::with_capacity(spec.n_layers());
            for (l, &lambda) in spec.plant.iter().enumerate() {
                let geometry = self.stimulus_geometry(s, &offset, lambda);
                let mut rows = Vec::with_capacity(next as usize * spec.d);
                for (w, g) in geometry.iter().enumerate() {
                    let v = self.embed(l, g, &mut rng);
                    if split[w] {
                        let jitter = gaussian(&mut rng, spec.d, SUBWORD_SPREAD);
                        rows.extend(v.iter().zip(&jitter).map(|(a, j)| (a + j) as f32));
                        rows.extend(v.iter().zip(&jitter).map(|(a, j)| (a - j) as f32));
                    } else {
                        rows.extend(v.iter().map(|&a| a as f32));
                    }
                }
                layers.push(rows);
            }
            store.push(key, spans, layers)?;
        }
        Ok(store)
    }
}

/// The UD tree of a stimulus as a parser would return it: the wh word, the
/// auxiliary and the matrix subject attach to the matrix verb, the embedded
/// verb is its `xcomp` (bare, infinitival) or `ccomp` (finite), the embedded
/// subject is the embedded verb's `nsubj`, infinitival `to` is its `mark`,
/// and `?` is `punct` of the root.
pub fn reference_parse(stimulus: &Stimulus) -> ParsedSentence {
    let tokens = stimulus.tokens();
    let p = stimulus.positions;
    let n = tokens.len();
    let matrix_verb = 4; // 1-based
    let evb = p.embedded_verb + 1;
    let comp = if stimulus.condition == Condition::Finite {
        "ccomp"
    } else {
        "xcomp"
    };
    let rows: Vec<(&str, usize, &str)> = tokens
        .iter()
        .enumerate()
        .map(|(i, form)| {
            let (head, rel) = match i {
                0 => (matrix_verb, "obj"),
                1 => (matrix_verb, "aux"),
                2 => (matrix_verb, "nsubj"),
                3 => (0, "root"),
                _ if i == p.embedded_subject => (evb, "nsubj"),
                _ if i == p.embedded_verb => (matrix_verb, comp),
                _ if i + 1 == n => (matrix_verb, "punct"),
                _ => (evb, "mark"),
            };
            (form.as_str(), head, rel)
        })
        .collect();
    ParsedSentence::from_heads(Some(stimulus.key()), rows).expect("templates give valid trees")
}

/// Emulates the extractor's patched forward pass for a model without
/// downstream interaction: layers below the plan's layer are copied from the
/// target run; from that layer on, the planned target token carries the
/// source token's vector. Stimuli outside the plan are copied unchanged.
pub fn patched_store(target: &ActivationStore, source: &ActivationStore, plan: &PatchPlan) -> Result<ActivationStore> {
    let d = target.dim();
    let mut out = ActivationStore::new(target.model_id(), d, target.n_layers());
    for (k, v) in target.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    out.set_metadata("patch_layer", plan.layer.to_string());
    out.set_metadata("patch_site", plan.site.as_str());
    let entries: std::collections::HashMap<&str, _> = plan.entries.iter().map(|e| (e.target_key.as_str(), e)).collect();
    let keys: Vec<String> = target.keys().map(str::to_string).collect();
    for key in keys {
        let mut layers = Vec::with_capacity(target.n_layers());
        for l in 0..target.n_layers() {
            let mut rows = target.token_rows(l, &key)?.to_vec();
            if let Some(e) = entries.get(key.as_str()) {
                if l >= plan.layer {
                    let src = source.token_rows(l, &e.source_key)?;
                    let n_src = src.len() / d;
                    let n_tgt = rows.len() / d;
                    if e.source_token >= n_src || e.target_token >= n_tgt {
                        return Err(Error::Patch(format!(
                            "item {}: token index out of range ({} of {n_src} / {} of {n_tgt})",
                            e.item_id, e.source_token, e.target_token
                        )));
                    }
                    rows[e.target_token * d..(e.target_token + 1) * d]
                        .copy_from_slice(&src[e.source_token * d..(e.source_token + 1) * d]);
                }
            }
            layers.push(rows);
        }
        out.push(key.clone(), target.word_spans(&key)?.to_vec(), layers)?;
    }
    Ok(out)
}
