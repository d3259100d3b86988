//! Condition effects on probe distances.
//!
//! Per `(layer, pair)` cell the distances are regressed on a treatment-coded
//! condition factor (`bare` as intercept) with item-clustered sandwich
//! errors. p-values of every `(layer, pair, contrast)` test of one model form
//! a single Benjamini–Hochberg family. Independently of the regression, a
//! cluster bootstrap over items gives the bootstrap-mean effect and its
//! percentile interval.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::labels::{Condition, Contrast, Pair, StimulusKey};
use crate::probe::ProbeMatrix;
use crate::stimgen::Stimulus;
use crate::store::ActivationStore;
use crate::udtree::VerdictTable;

/// One probe distance: item `item_id` in `condition`, pair, layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub item_id: u32,
    pub condition: Condition,
    pub pair: Pair,
    pub layer: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceFlavor {
    Cr0,
    #[default]
    Cr1,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PValueReference {
    /// Student t with `G − 1` degrees of freedom.
    #[default]
    T,
    Normal,
}

/// OLS fit of `d ~ 1 + 1[fin] + 1[inf]`. Coefficient order everywhere is
/// `[intercept, fin, inf]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub beta: [f64; 3],
    pub cov: [[f64; 3]; 3],
    pub se: [f64; 3],
    pub p: [f64; 3],
    pub n_clusters: usize,
    pub n_rows: usize,
}

impl OlsFit {
    pub fn beta_of(&self, c: Contrast) -> f64 {
        self.beta[contrast_col(c)]
    }

    pub fn se_of(&self, c: Contrast) -> f64 {
        self.se[contrast_col(c)]
    }

    pub fn p_of(&self, c: Contrast) -> f64 {
        self.p[contrast_col(c)]
    }
}

fn contrast_col(c: Contrast) -> usize {
    match c {
        Contrast::Fin => 1,
        Contrast::Inf => 2,
    }
}

fn design_row(c: Condition) -> [f64; 3] {
    match c {
        Condition::Bare => [1.0, 0.0, 0.0],
        Condition::Finite => [1.0, 1.0, 0.0],
        Condition::Infinitival => [1.0, 0.0, 1.0],
    }
}

/// Treatment-coded OLS with item-clustered covariance.
///
/// The design is saturated in the condition factor, so the coefficients are
/// the cell means and their differences, and `(XᵀX)⁻¹` has a closed form in
/// the cell counts.
pub fn fit_condition_ols(rows: &[DistanceRow], flavor: CovarianceFlavor, reference: PValueReference) -> Result<OlsFit> {
    if let Some(r) = rows.iter().find(|r| !r.distance.is_finite()) {
        return Err(Error::Regression(format!(
            "non-finite distance for item {} ({})",
            r.item_id, r.condition
        )));
    }
    let mut count = [0usize; 3];
    let mut sum = [0.0f64; 3];
    for r in rows {
        count[r.condition.index()] += 1;
        sum[r.condition.index()] += r.distance;
    }
    let missing: Vec<&str> = Condition::ALL
        .iter()
        .filter(|c| count[c.index()] == 0)
        .map(|c| c.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Regression(format!(
            "singular design: no rows for condition(s) {}",
            missing.join(", ")
        )));
    }
    let mut clusters: BTreeMap<u32, [f64; 3]> = BTreeMap::new();
    for r in rows {
        clusters.entry(r.item_id).or_default();
    }
    let g = clusters.len();
    if g < 2 {
        return Err(Error::Regression(format!(
            "clustered errors need at least 2 items, got {g}"
        )));
    }
    let n = rows.len();
    let k = 3;
    if n <= k {
        return Err(Error::Regression(format!("{n} rows for {k} coefficients")));
    }

    let mean = |c: Condition| sum[c.index()] / count[c.index()] as f64;
    let (mb, mf, mi) = (
        mean(Condition::Bare),
        mean(Condition::Finite),
        mean(Condition::Infinitival),
    );
    let beta = [mb, mf - mb, mi - mb];

    let (nb, nf, ni) = (
        count[Condition::Bare.index()] as f64,
        count[Condition::Finite.index()] as f64,
        count[Condition::Infinitival.index()] as f64,
    );
    let bread = [
        [1.0 / nb, -1.0 / nb, -1.0 / nb],
        [-1.0 / nb, 1.0 / nf + 1.0 / nb, 1.0 / nb],
        [-1.0 / nb, 1.0 / nb, 1.0 / ni + 1.0 / nb],
    ];

    // score per cluster: X_gᵀ e_g
    for r in rows {
        let x = design_row(r.condition);
        let fitted = beta[0] + beta[1] * x[1] + beta[2] * x[2];
        let e = r.distance - fitted;
        let s = clusters.get_mut(&r.item_id).expect("cluster registered above");
        for (acc, xi) in s.iter_mut().zip(x) {
            *acc += xi * e;
        }
    }
    let mut meat = [[0.0; 3]; 3];
    for s in clusters.values() {
        for a in 0..3 {
            for b in 0..3 {
                meat[a][b] += s[a] * s[b];
            }
        }
    }
    let scale = match flavor {
        CovarianceFlavor::Cr0 => 1.0,
        CovarianceFlavor::Cr1 => (g as f64 / (g - 1) as f64) * ((n - 1) as f64 / (n - k) as f64),
    };
    let cov = mat3_scale(&mat3_mul(&mat3_mul(&bread, &meat), &bread), scale);

    let mut se = [0.0; 3];
    let mut p = [0.0; 3];
    for j in 0..3 {
        se[j] = cov[j][j].max(0.0).sqrt();
        p[j] = two_sided_p(beta[j], se[j], g, reference)?;
    }
    Ok(OlsFit {
        beta,
        cov,
        se,
        p,
        n_clusters: g,
        n_rows: n,
    })
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat3_scale(a: &[[f64; 3]; 3], s: f64) -> [[f64; 3]; 3] {
    a.map(|row| row.map(|x| x * s))
}

/// Two-sided p-value of `beta / se`. A zero standard error gives 1 for a
/// zero coefficient and 0 otherwise.
fn two_sided_p(beta: f64, se: f64, n_clusters: usize, reference: PValueReference) -> Result<f64> {
    if se == 0.0 {
        return Ok(if beta == 0.0 { 1.0 } else { 0.0 });
    }
    let t = (beta / se).abs();
    let tail = match reference {
        PValueReference::T => StudentsT::new(0.0, 1.0, (n_clusters - 1) as f64)
            .map_err(|e| Error::Regression(e.to_string()))?
            .sf(t),
        PValueReference::Normal => Normal::new(0.0, 1.0)
            .map_err(|e| Error::Regression(e.to_string()))?
            .sf(t),
    };
    Ok((2.0 * tail).min(1.0))
}

/// Benjamini–Hochberg adjusted p-values and the rejection mask at `alpha`.
/// Output is in input order.
pub fn bh_fdr(p_values: &[f64], alpha: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Regression(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p_values[i] * m as f64 / (rank + 1) as f64);
        q[i] = running.min(1.0);
    }
    let reject = q.iter().map(|&x| x <= alpha).collect();
    Ok((q, reject))
}

/// Seed for one `(model, pair, contrast)` resampling family, derived from
/// the run seed so that families never share a stream.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Cluster indices drawn with replacement for resample `b`. The stream
/// depends only on `(master_seed, b)`, never on evaluation order.
pub fn resample_indices(master_seed: u64, b: u64, n_clusters: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(b);
    (0..n_clusters).map(|_| rng.random_range(0..n_clusters)).collect()
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    if frac == 0.0 || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
    pub n_items: usize,
}

/// Per-item sums of the bare and target-condition distances.
#[derive(Debug, Clone, Copy, Default)]
struct ItemCells {
    bare_sum: f64,
    bare_n: usize,
    target_sum: f64,
    target_n: usize,
}

/// Cluster bootstrap of the raw mean difference `mean(target) − mean(bare)`.
///
/// Items are drawn with replacement and enter with all their rows. Resample
/// `b` uses [`resample_indices`]`(seed, b, G)` over items in ascending id
/// order; the interval is the 2.5/97.5 linear-interpolation percentile.
pub fn cluster_bootstrap(
    rows: &[DistanceRow],
    contrast: Contrast,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapSummary> {
    let target = contrast.condition();
    let mut by_item: BTreeMap<u32, ItemCells> = BTreeMap::new();
    for r in rows {
        let cell = by_item.entry(r.item_id).or_default();
        if r.condition == Condition::Bare {
            cell.bare_sum += r.distance;
            cell.bare_n += 1;
        } else if r.condition == target {
            cell.target_sum += r.distance;
            cell.target_n += 1;
        }
    }
    let items: Vec<ItemCells> = by_item.into_values().collect();
    if items.len() < 2 {
        return Err(Error::Bootstrap(format!("need at least 2 items, got {}", items.len())));
    }
    if n_resamples == 0 {
        return Err(Error::Bootstrap("zero resamples requested".into()));
    }
    let stats: Vec<Option<f64>> = (0..n_resamples as u64)
        .into_par_iter()
        .map(|b| {
            let mut acc = ItemCells::default();
            for i in resample_indices(seed, b, items.len()) {
                let c = &items[i];
                acc.bare_sum += c.bare_sum;
                acc.bare_n += c.bare_n;
                acc.target_sum += c.target_sum;
                acc.target_n += c.target_n;
            }
            (acc.bare_n > 0 && acc.target_n > 0)
                .then(|| acc.target_sum / acc.target_n as f64 - acc.bare_sum / acc.bare_n as f64)
        })
        .collect();
    let mut stats: Vec<f64> = stats
        .into_iter()
        .enumerate()
        .map(|(b, s)| {
            s.ok_or_else(|| {
                Error::Bootstrap(format!(
                    "resample {b} has no {} or no bare rows; every item needs both",
                    target
                ))
            })
        })
        .collect::<Result<_>>()?;
    let mean = stats.iter().sum::<f64>() / stats.len() as f64;
    stats.sort_by(f64::total_cmp);
    Ok(BootstrapSummary {
        mean,
        ci_low: percentile_sorted(&stats, 0.025),
        ci_high: percentile_sorted(&stats, 0.975),
        n_resamples,
        n_items: items.len(),
    })
}

/// Bootstrap of the mean of one value per cluster, with the same index
/// stream and percentile rule as [`cluster_bootstrap`].
pub fn bootstrap_mean(values: &[f64], n_resamples: usize, seed: u64) -> Result<BootstrapSummary> {
    if values.len() < 2 {
        return Err(Error::Bootstrap(format!("need at least 2 items, got {}", values.len())));
    }
    if n_resamples == 0 {
        return Err(Error::Bootstrap("zero resamples requested".into()));
    }
    let n = values.len();
    let mut stats: Vec<f64> = (0..n_resamples as u64)
        .into_par_iter()
        .map(|b| resample_indices(seed, b, n).iter().map(|&i| values[i]).sum::<f64>() / n as f64)
        .collect();
    let mean = stats.iter().sum::<f64>() / stats.len() as f64;
    stats.sort_by(f64::total_cmp);
    Ok(BootstrapSummary {
        mean,
        ci_low: percentile_sorted(&stats, 0.025),
        ci_high: percentile_sorted(&stats, 0.975),
        n_resamples,
        n_items: n,
    })
}

/// Knobs for a model's effect table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectsConfig {
    pub alpha: f64,
    pub n_resamples: usize,
    pub seed: u64,
    pub covariance: CovarianceFlavor,
    pub p_reference: PValueReference,
}

impl Default for EffectsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_resamples: 1000,
            seed: 0,
            covariance: CovarianceFlavor::Cr1,
            p_reference: PValueReference::T,
        }
    }
}

impl EffectsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Regression(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        if self.n_resamples == 0 {
            return Err(Error::Bootstrap("n_resamples must be positive".into()));
        }
        Ok(())
    }
}

/// One contrast of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastEstimate {
    pub beta_ols: f64,
    pub se: f64,
    pub p: f64,
    pub q: f64,
    pub beta_boot: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Effects for one `(model, layer, pair)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub model: String,
    pub layer: usize,
    pub pair: Pair,
    pub beta0: f64,
    pub fin: ContrastEstimate,
    pub inf: ContrastEstimate,
    pub n_items: usize,
    pub n_rows: usize,
}

impl EffectEstimate {
    pub fn contrast(&self, c: Contrast) -> &ContrastEstimate {
        match c {
            Contrast::Fin => &self.fin,
            Contrast::Inf => &self.inf,
        }
    }

    pub fn rows(&self) -> [EffectRow; 2] {
        Contrast::ALL.map(|c| {
            let e = self.contrast(c);
            EffectRow {
                model: self.model.clone(),
                layer: self.layer,
                pair: self.pair,
                contrast: c,
                beta_ols: e.beta_ols,
                se: e.se,
                p: e.p,
                q: e.q,
                beta_boot: e.beta_boot,
                ci_low: e.ci_low,
                ci_high: e.ci_high,
                n_items: self.n_items,
                n_rows: self.n_rows,
            }
        })
    }
}

/// Flat output record; the CSV / JSON effect table schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub model: String,
    pub layer: usize,
    pub pair: Pair,
    pub contrast: Contrast,
    pub beta_ols: f64,
    pub se: f64,
    pub p: f64,
    pub q: f64,
    pub beta_boot: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_items: usize,
    pub n_rows: usize,
}

/// Probe distances for every stimulus, layer and pair, skipping
/// `(item, pair)` combinations that failed the invariance check.
pub fn compute_distance_rows(
    store: &ActivationStore,
    probes: &BTreeMap<usize, ProbeMatrix>,
    stimuli: &[Stimulus],
    verdicts: &VerdictTable,
) -> Result<Vec<DistanceRow>> {
    let missing: Vec<String> = probes
        .keys()
        .filter(|&&l| l >= store.n_layers())
        .map(|l| l.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Store(format!(
            "store `{}` has {} layers; no activations for probe layer(s) {}",
            store.model_id(),
            store.n_layers(),
            missing.join(", ")
        )));
    }
    for (&layer, p) in probes {
        if p.layer != layer {
            return Err(Error::Probe(format!(
                "probe filed under layer {layer} was trained for layer {}",
                p.layer
            )));
        }
    }
    let per_layer: Vec<Vec<DistanceRow>> = probes
        .par_iter()
        .map(|(&layer, probe)| {
            let mut out = Vec::new();
            for s in stimuli {
                let key = StimulusKey::new(s.item_id, s.condition).to_string();
                for pair in Pair::ALL {
                    if !verdicts.passes(s.item_id, pair) {
                        continue;
                    }
                    let (a, b) = pair.roles();
                    let u = store.word_vector(layer, &key, s.positions.get(a))?;
                    let v = store.word_vector(layer, &key, s.positions.get(b))?;
                    out.push(DistanceRow {
                        item_id: s.item_id,
                        condition: s.condition,
                        pair,
                        layer,
                        distance: probe.distance_raw(&u, &v)?,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_layer.into_iter().flatten().collect())
}

/// Fits every `(layer, pair)` cell found in `rows`, bootstraps both
/// contrasts and applies BH across the model's whole test family.
pub fn estimate_effects(model: &str, rows: &[DistanceRow], config: &EffectsConfig) -> Result<Vec<EffectEstimate>> {
    config.validate()?;
    let mut cells: BTreeMap<(usize, Pair), Vec<DistanceRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.layer, r.pair)).or_default().push(*r);
    }
    let seeds: BTreeMap<(Pair, Contrast), u64> = Pair::ALL
        .iter()
        .flat_map(|&p| Contrast::ALL.map(|c| (p, c)))
        .map(|(p, c)| ((p, c), derive_seed(config.seed, &[model, p.as_str(), c.as_str()])))
        .collect();

    let cells: Vec<((usize, Pair), Vec<DistanceRow>)> = cells.into_iter().collect();
    let fitted: Vec<(OlsFit, [BootstrapSummary; 2], usize)> = cells
        .par_iter()
        .map(|((layer, pair), rows)| {
            let ctx = |e: Error| match e {
                Error::Regression(m) => Error::Regression(format!("layer {layer}, {pair}: {m}")),
                Error::Bootstrap(m) => Error::Bootstrap(format!("layer {layer}, {pair}: {m}")),
                other => other,
            };
            let fit = fit_condition_ols(rows, config.covariance, config.p_reference).map_err(ctx)?;
            let fin = cluster_bootstrap(rows, Contrast::Fin, config.n_resamples, seeds[&(*pair, Contrast::Fin)])
                .map_err(ctx)?;
            let inf = cluster_bootstrap(rows, Contrast::Inf, config.n_resamples, seeds[&(*pair, Contrast::Inf)])
                .map_err(ctx)?;
            let n_items = rows.iter().map(|r| r.item_id).collect::<BTreeSet<_>>().len();
            Ok((fit, [fin, inf], n_items))
        })
        .collect::<Result<_>>()?;

    let p_family: Vec<f64> = fitted
        .iter()
        .flat_map(|(fit, _, _)| Contrast::ALL.map(|c| fit.p_of(c)))
        .collect();
    let (q, _) = bh_fdr(&p_family, config.alpha)?;

    Ok(cells
        .iter()
        .zip(fitted)
        .enumerate()
        .map(|(i, (((layer, pair), _), (fit, boots, n_items)))| {
            let contrast = |c: Contrast, j: usize| ContrastEstimate {
                beta_ols: fit.beta_of(c),
                se: fit.se_of(c),
                p: fit.p_of(c),
                q: q[2 * i + j],
                beta_boot: boots[j].mean,
                ci_low: boots[j].ci_low,
                ci_high: boots[j].ci_high,
            };
            EffectEstimate {
                model: model.to_string(),
                layer: *layer,
                pair: *pair,
                beta0: fit.beta[0],
                fin: contrast(Contrast::Fin, 0),
                inf: contrast(Contrast::Inf, 1),
                n_items,
                n_rows: fit.n_rows,
            }
        })
        .collect())
}

/// Distance rows plus effect table for one model run.
pub fn assemble_estimates(
    model: &str,
    store: &ActivationStore,
    probes: &BTreeMap<usize, ProbeMatrix>,
    stimuli: &[Stimulus],
    verdicts: &VerdictTable,
    config: &EffectsConfig,
) -> Result<Vec<EffectEstimate>> {
    let rows = compute_distance_rows(store, probes, stimuli, verdicts)?;
    estimate_effects(model, &rows, config)
}

pub fn effect_rows(estimates: &[EffectEstimate]) -> Vec<EffectRow> {
    estimates.iter().flat_map(EffectEstimate::rows).collect()
}

pub fn write_effects_csv<W: Write>(out: W, rows: &[EffectRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(EFFECT_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub const EFFECT_COLUMNS: [&str; 13] = [
    "model",
    "layer",
    "pair",
    "contrast",
    "beta_ols",
    "se",
    "p",
    "q",
    "beta_boot",
    "ci_low",
    "ci_high",
    "n_items",
    "n_rows",
];

pub fn read_effects_csv(path: &Path) -> Result<Vec<EffectRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

pub fn write_effects_json<W: Write>(out: W, rows: &[EffectRow]) -> Result<()> {
    serde_json::to_writer_pretty(out, rows)?;
    Ok(())
}

pub fn read_effects_json(path: &Path) -> Result<Vec<EffectRow>> {
    let text = std::fs::read_to_string(path).map_err(crate::error::io_at(path))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal as NormalDist};

    fn row(item_id: u32, condition: Condition, distance: f64) -> DistanceRow {
        DistanceRow {
            item_id,
            condition,
            pair: Pair::WhEsubj,
            layer: 0,
            distance,
        }
    }

    fn noiseless(n: u32) -> Vec<DistanceRow> {
        (0..n)
            .flat_map(|i| {
                [
                    row(i, Condition::Bare, 1.0),
                    row(i, Condition::Infinitival, 1.2),
                    row(i, Condition::Finite, 1.5),
                ]
            })
            .collect()
    }

    #[test]
    fn noiseless_group_means() {
        let fit = fit_condition_ols(&noiseless(10), CovarianceFlavor::Cr1, PValueReference::T).unwrap();
        assert!((fit.beta[0] - 1.0).abs() < 1e-12);
        assert!((fit.beta[1] - 0.5).abs() < 1e-12);
        assert!((fit.beta[2] - 0.2).abs() < 1e-12);
        assert!(fit.se.iter().all(|s| *s < 1e-12));
    }

    #[test]
    fn equal_distances_give_zero_effects() {
        let rows: Vec<_> = noiseless(5)
            .into_iter()
            .map(|r| DistanceRow { distance: 2.0, ..r })
            .collect();
        let fit = fit_condition_ols(&rows, CovarianceFlavor::Cr1, PValueReference::T).unwrap();
        assert_eq!(fit.beta[1], 0.0);
        assert_eq!(fit.beta[2], 0.0);
        assert_eq!(fit.p[1], 1.0);
    }

    #[test]
    fn ols_errors() {
        let rows: Vec<_> = noiseless(4)
            .into_iter()
            .filter(|r| r.condition != Condition::Finite)
            .collect();
        assert!(matches!(
            fit_condition_ols(&rows, CovarianceFlavor::Cr1, PValueReference::T),
            Err(Error::Regression(m)) if m.contains("finite")
        ));
        let one = noiseless(1);
        assert!(fit_condition_ols(&one, CovarianceFlavor::Cr1, PValueReference::T).is_err());
    }

    #[test]
    fn cr1_is_scaled_cr0() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<_> = noiseless(12)
            .into_iter()
            .map(|r| DistanceRow {
                distance: r.distance + rng.random_range(-0.3..0.3),
                ..r
            })
            .collect();
        let a = fit_condition_ols(&rows, CovarianceFlavor::Cr0, PValueReference::Normal).unwrap();
        let b = fit_condition_ols(&rows, CovarianceFlavor::Cr1, PValueReference::Normal).unwrap();
        let scale = 12.0 / 11.0 * 35.0 / 33.0;
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.cov[i][j] * scale - b.cov[i][j]).abs() < 1e-14);
            }
        }
        // t reference is more conservative than normal
        let t = fit_condition_ols(&rows, CovarianceFlavor::Cr1, PValueReference::T).unwrap();
        assert!(t.p[1] >= b.p[1]);
    }

    #[test]
    fn bh_small_cases() {
        let (q, r) = bh_fdr(&[0.03], 0.05).unwrap();
        assert_eq!(q, vec![0.03]);
        assert_eq!(r, vec![true]);
        let (q, r) = bh_fdr(&[0.04; 6], 0.05).unwrap();
        assert!(q.iter().all(|x| (x - 0.04).abs() < 1e-15));
        assert!(r.iter().all(|x| *x));
        let (q, _) = bh_fdr(&[0.5, 0.01, 0.03, 0.02], 0.05).unwrap();
        let expect = [0.5, 0.04, 0.04, 0.04];
        for (a, b) in q.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{q:?}");
        }
        assert!(bh_fdr(&[], 0.05).unwrap().0.is_empty());
        assert!(bh_fdr(&[1.2], 0.05).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&xs, 0.0), 1.0);
        assert_eq!(percentile_sorted(&xs, 1.0), 5.0);
        assert_eq!(percentile_sorted(&xs, 0.5), 3.0);
        assert!((percentile_sorted(&xs, 0.1) - 1.4).abs() < 1e-15);
        assert_eq!(percentile_sorted(&[7.0], 0.975), 7.0);
    }

    #[test]
    fn bootstrap_zero_variance_collapses() {
        let s = cluster_bootstrap(&noiseless(8), Contrast::Fin, 200, 1).unwrap();
        assert!((s.ci_low - 0.5).abs() < 1e-12 && (s.ci_high - 0.5).abs() < 1e-12);
        assert!((s.mean - 0.5).abs() < 1e-12);
        let zero: Vec<_> = noiseless(8)
            .into_iter()
            .map(|r| DistanceRow { distance: 1.0, ..r })
            .collect();
        let s = cluster_bootstrap(&zero, Contrast::Inf, 50, 1).unwrap();
        assert_eq!((s.ci_low, s.ci_high, s.mean), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bootstrap_is_seeded_and_thread_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = NormalDist::new(0.0, 0.2).unwrap();
        let rows: Vec<_> = noiseless(20)
            .into_iter()
            .map(|r| DistanceRow {
                distance: r.distance + noise.sample(&mut rng),
                ..r
            })
            .collect();
        let a = cluster_bootstrap(&rows, Contrast::Fin, 300, 77).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| cluster_bootstrap(&rows, Contrast::Fin, 300, 77).unwrap());
        assert_eq!(a, b);
        let c = cluster_bootstrap(&rows, Contrast::Fin, 300, 78).unwrap();
        assert_ne!(a, c);
        assert!(a.ci_low <= a.mean && a.mean <= a.ci_high);
    }

    #[test]
    fn bootstrap_needs_two_items() {
        assert!(matches!(
            cluster_bootstrap(&noiseless(1), Contrast::Fin, 10, 0),
            Err(Error::Bootstrap(_))
        ));
    }

    #[test]
    fn resample_streams_differ_and_repeat() {
        assert_eq!(resample_indices(5, 3, 40), resample_indices(5, 3, 40));
        assert_ne!(resample_indices(5, 3, 40), resample_indices(5, 4, 40));
        assert!(resample_indices(5, 0, 7).iter().all(|&i| i < 7));
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let a = derive_seed(0, &["m", "wh_esubj", "fin"]);
        assert_eq!(a, derive_seed(0, &["m", "wh_esubj", "fin"]));
        assert_ne!(a, derive_seed(0, &["m", "wh_esubj", "inf"]));
        assert_ne!(a, derive_seed(1, &["m", "wh_esubj", "fin"]));
        assert_ne!(derive_seed(0, &["ab", "c"]), derive_seed(0, &["a", "bc"]));
    }

    #[test]
    fn family_has_eight_tests_for_two_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        for layer in 0..2 {
            for pair in Pair::ALL {
                for r in noiseless(6) {
                    rows.push(DistanceRow {
                        layer,
                        pair,
                        distance: r.distance + rng.random_range(-0.5..0.5),
                        ..r
                    });
                }
            }
        }
        let cfg = EffectsConfig {
            n_resamples: 100,
            ..EffectsConfig::default()
        };
        let est = estimate_effects("toy", &rows, &cfg).unwrap();
        assert_eq!(est.len(), 4);
        let table = effect_rows(&est);
        assert_eq!(table.len(), 8);
        let ps: Vec<f64> = table.iter().map(|r| r.p).collect();
        let (q, _) = bh_fdr(&ps, 0.05).unwrap();
        for (r, q) in table.iter().zip(q) {
            assert_eq!(r.q, q);
            assert!(r.q >= r.p);
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let rows = vec![EffectRow {
            model: "m".into(),
            layer: 3,
            pair: Pair::EsubjEvb,
            contrast: Contrast::Inf,
            beta_ols: 0.1 + 0.2,
            se: 1e-300,
            p: 0.5,
            q: 1.0,
            beta_boot: -0.25,
            ci_low: -1.0,
            ci_high: 0.125,
            n_items: 10,
            n_rows: 30,
        }];
        let mut buf = Vec::new();
        write_effects_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&EFFECT_COLUMNS.join(",")));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(read_effects_csv(&path).unwrap(), rows);
        let jpath = dir.path().join("e.json");
        let mut jbuf = Vec::new();
        write_effects_json(&mut jbuf, &rows).unwrap();
        std::fs::write(&jpath, jbuf).unwrap();
        assert_eq!(read_effects_json(&jpath).unwrap(), rows);
    }
}
