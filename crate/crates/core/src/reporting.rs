//! Canonical-layer selection, robustness summaries and verdicts.
//!
//! All layer selection and summary metrics use the OLS coefficient; the
//! bootstrap mean and its interval are carried alongside for display.
//! `L*` is the layer with the largest finite–bare effect on wh–esubj, and
//! every contrast is also reported at `L*`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::effects::EffectRow;
use crate::error::{Error, Result};
use crate::labels::{Contrast, Pair};
use crate::patchlab::{PatchResult, PatchVerdict};
use crate::store::write_bytes_atomic;

/// Predicted sign of each effect: `+1` or `−1`.
pub fn predicted_direction(pair: Pair, contrast: Contrast) -> f64 {
    match (pair, contrast) {
        (Pair::EsubjEvb, Contrast::Fin) => -1.0,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPoint {
    pub layer: usize,
    pub beta_ols: f64,
    pub beta_boot: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub q: f64,
    /// FDR-significant with the predicted sign.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub model: String,
    pub pair: Pair,
    pub contrast: Contrast,
    /// Indexed by layer, contiguous from 0.
    pub points: Vec<LayerPoint>,
}

impl LayerProfile {
    pub fn betas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.beta_ols).collect()
    }

    /// Layer of the extremum in the predicted direction; ties to the lowest.
    pub fn peak_layer(&self) -> usize {
        let dir = predicted_direction(self.pair, self.contrast);
        let signed: Vec<f64> = self.points.iter().map(|p| dir * p.beta_ols).collect();
        canonical_layer(&signed).expect("profiles are never empty")
    }

    pub fn median(&self) -> f64 {
        median(&self.betas())
    }

    pub fn pct_sig(&self) -> f64 {
        self.points.iter().filter(|p| p.significant).count() as f64 / self.points.len() as f64
    }
}

/// Index of the maximum, ties broken toward the lowest index.
pub fn canonical_layer(betas: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &b) in betas.iter().enumerate() {
        if best.is_none_or(|j| b > betas[j]) {
            best = Some(i);
        }
    }
    best
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Splits an effect table into per-(model, pair, contrast) profiles, in
/// sorted order. Every profile must cover layers `0..L` without gaps.
pub fn build_profiles(rows: &[EffectRow], alpha: f64) -> Result<Vec<LayerProfile>> {
    let mut groups: BTreeMap<(String, Pair, Contrast), BTreeMap<usize, &EffectRow>> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.model.clone(), r.pair, r.contrast)).or_default();
        if g.insert(r.layer, r).is_some() {
            return Err(Error::Report(format!(
                "{} {} {}: layer {} listed twice",
                r.model, r.pair, r.contrast, r.layer
            )));
        }
    }
    groups
        .into_iter()
        .map(|((model, pair, contrast), layers)| {
            let n = layers.len();
            if layers.keys().next_back() != Some(&(n - 1)) {
                let missing: Vec<String> = (0..*layers.keys().next_back().unwrap())
                    .filter(|l| !layers.contains_key(l))
                    .map(|l| l.to_string())
                    .collect();
                return Err(Error::Report(format!(
                    "{model} {pair} {contrast}: missing layer(s) {}",
                    missing.join(", ")
                )));
            }
            let dir = predicted_direction(pair, contrast);
            let points = layers
                .into_values()
                .map(|r| LayerPoint {
                    layer: r.layer,
                    beta_ols: r.beta_ols,
                    beta_boot: r.beta_boot,
                    ci_low: r.ci_low,
                    ci_high: r.ci_high,
                    q: r.q,
                    significant: r.q <= alpha && dir * r.beta_ols > 0.0,
                })
                .collect();
            Ok(LayerProfile {
                model,
                pair,
                contrast,
                points,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub n_layers: usize,
    pub l_star: usize,
    pub beta_fin_peak: f64,
    pub beta_inf_peak: f64,
    pub beta_fin_peak_layer: usize,
    pub beta_inf_peak_layer: usize,
    pub beta_fin_canon: f64,
    pub beta_inf_canon: f64,
    /// `beta_fin_canon / beta_inf_canon`; absent when the denominator is 0.
    pub ratio_canon: Option<f64>,
    pub median_fin: f64,
    pub median_inf: f64,
    pub pct_sig_fin: f64,
    pub pct_sig_inf: f64,
    pub gradient_pass_peak: bool,
    pub gradient_pass_canon: bool,
    pub esubj_evb_fin_peak: f64,
    pub esubj_evb_inf_peak: f64,
    pub esubj_evb_sign_asymmetry: bool,
}

fn profile<'a>(profiles: &'a [LayerProfile], model: &str, pair: Pair, contrast: Contrast) -> Result<&'a LayerProfile> {
    profiles
        .iter()
        .find(|p| p.model == model && p.pair == pair && p.contrast == contrast)
        .ok_or_else(|| Error::Report(format!("{model}: no estimates for {pair} {contrast}")))
}

/// Headline numbers for one model from its four profiles.
pub fn summarize_model(profiles: &[LayerProfile], model: &str) -> Result<ModelSummary> {
    let wf = profile(profiles, model, Pair::WhEsubj, Contrast::Fin)?;
    let wi = profile(profiles, model, Pair::WhEsubj, Contrast::Inf)?;
    let ef = profile(profiles, model, Pair::EsubjEvb, Contrast::Fin)?;
    let ei = profile(profiles, model, Pair::EsubjEvb, Contrast::Inf)?;
    let n_layers = wf.points.len();
    for p in [wi, ef, ei] {
        if p.points.len() != n_layers {
            return Err(Error::Report(format!(
                "{model}: {} {} covers {} layers, wh_esubj fin covers {n_layers}",
                p.pair,
                p.contrast,
                p.points.len()
            )));
        }
    }
    let l_star = canonical_layer(&wf.betas()).expect("profiles are never empty");
    let (lf, li) = (wf.peak_layer(), wi.peak_layer());
    let beta_fin_peak = wf.points[lf].beta_ols;
    let beta_inf_peak = wi.points[li].beta_ols;
    let beta_fin_canon = wf.points[l_star].beta_ols;
    let beta_inf_canon = wi.points[l_star].beta_ols;
    let esubj_evb_fin_peak = ef.points[ef.peak_layer()].beta_ols;
    let esubj_evb_inf_peak = ei.points[ei.peak_layer()].beta_ols;
    Ok(ModelSummary {
        model: model.to_string(),
        n_layers,
        l_star,
        beta_fin_peak,
        beta_inf_peak,
        beta_fin_peak_layer: lf,
        beta_inf_peak_layer: li,
        beta_fin_canon,
        beta_inf_canon,
        ratio_canon: (beta_inf_canon != 0.0).then(|| beta_fin_canon / beta_inf_canon),
        median_fin: wf.median(),
        median_inf: wi.median(),
        pct_sig_fin: wf.pct_sig(),
        pct_sig_inf: wi.pct_sig(),
        gradient_pass_peak: beta_fin_peak > beta_inf_peak && beta_inf_peak > 0.0,
        gradient_pass_canon: beta_fin_canon > beta_inf_canon && beta_inf_canon > 0.0,
        esubj_evb_fin_peak,
        esubj_evb_inf_peak,
        esubj_evb_sign_asymmetry: esubj_evb_fin_peak < 0.0 && esubj_evb_inf_peak > 0.0,
    })
}

/// One summary per model present in `profiles`, sorted by model.
pub fn summarize_all(profiles: &[LayerProfile]) -> Result<Vec<ModelSummary>> {
    let mut models: Vec<&str> = profiles.iter().map(|p| p.model.as_str()).collect();
    models.sort_unstable();
    models.dedup();
    models.into_iter().map(|m| summarize_model(profiles, m)).collect()
}

/// Per-model verdicts plus optional patching outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVerdict {
    pub model: String,
    pub l_star: usize,
    pub gradient_pass_peak: bool,
    pub gradient_pass_canon: bool,
    pub esubj_evb_sign_asymmetry: bool,
    pub patch: Option<PatchVerdict>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunVerdict {
    pub alpha: f64,
    pub models: Vec<ModelVerdict>,
    pub summaries: Vec<ModelSummary>,
    pub patch_results: Vec<PatchResult>,
    /// True when every model passes; vacuously true with no models.
    pub pass: bool,
}

pub fn run_verdict(
    alpha: f64,
    summaries: &[ModelSummary],
    patch_results: &[PatchResult],
    patch_verdicts: &[PatchVerdict],
) -> RunVerdict {
    let models: Vec<ModelVerdict> = summaries
        .iter()
        .map(|s| {
            let patch = patch_verdicts.iter().find(|v| v.model == s.model).cloned();
            ModelVerdict {
                model: s.model.clone(),
                l_star: s.l_star,
                gradient_pass_peak: s.gradient_pass_peak,
                gradient_pass_canon: s.gradient_pass_canon,
                esubj_evb_sign_asymmetry: s.esubj_evb_sign_asymmetry,
                pass: s.gradient_pass_canon && s.esubj_evb_sign_asymmetry && patch.as_ref().is_none_or(|p| p.pass),
                patch,
            }
        })
        .collect();
    RunVerdict {
        alpha,
        pass: models.iter().all(|m| m.pass),
        models,
        summaries: summaries.to_vec(),
        patch_results: patch_results.to_vec(),
    }
}

/// File-name-safe form of a model id.
pub fn model_slug(model: &str) -> String {
    model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub const PROFILE_COLUMNS: [&str; 10] = [
    "model",
    "pair",
    "contrast",
    "layer",
    "beta_ols",
    "beta_boot",
    "ci_low",
    "ci_high",
    "q",
    "significant",
];

pub const FOREST_COLUMNS: [&str; 14] = [
    "model",
    "pair",
    "contrast",
    "peak_layer",
    "peak_beta_boot",
    "peak_ci_low",
    "peak_ci_high",
    "peak_beta_ols",
    "l_star",
    "canon_beta_boot",
    "canon_ci_low",
    "canon_ci_high",
    "canon_beta_ols",
    "canon_q",
];

pub const ROBUSTNESS_COLUMNS: [&str; 11] = [
    "model",
    "pair",
    "l_star",
    "fin_peak",
    "fin_at_lstar",
    "fin_med",
    "fin_pct_sig",
    "inf_peak",
    "inf_at_lstar",
    "inf_med",
    "inf_pct_sig",
];

pub const PATCH_FOREST_COLUMNS: [&str; 10] = [
    "model",
    "site",
    "pair",
    "layer",
    "delta_beta",
    "boot_mean",
    "ci_low",
    "ci_high",
    "n_items",
    "control_pass",
];

fn csv_bytes(header: &[&str], records: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Report(e.to_string()))
}

fn num(x: f64) -> String {
    x.to_string()
}

/// Writes layer profiles, forest, robustness and patch-forest CSVs and the
/// run-level `verdict.json` into `dir`. Returns the written paths.
pub fn emit_reports(dir: &Path, profiles: &[LayerProfile], verdict: &RunVerdict) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        write_bytes_atomic(&path, &bytes)?;
        written.push(path);
        Ok(())
    };

    for s in &verdict.summaries {
        let records = profiles
            .iter()
            .filter(|p| p.model == s.model)
            .flat_map(|p| {
                p.points.iter().map(move |pt| {
                    vec![
                        p.model.clone(),
                        p.pair.to_string(),
                        p.contrast.to_string(),
                        pt.layer.to_string(),
                        num(pt.beta_ols),
                        num(pt.beta_boot),
                        num(pt.ci_low),
                        num(pt.ci_high),
                        num(pt.q),
                        pt.significant.to_string(),
                    ]
                })
            })
            .collect();
        put(
            format!("layer_profile_{}.csv", model_slug(&s.model)),
            csv_bytes(&PROFILE_COLUMNS, records)?,
        )?;
    }

    let mut forest = Vec::new();
    let mut robustness = Vec::new();
    for s in &verdict.summaries {
        for pair in Pair::ALL {
            let mut robust = vec![s.model.clone(), pair.to_string(), s.l_star.to_string()];
            for contrast in Contrast::ALL {
                let p = profile(profiles, &s.model, pair, contrast)?;
                let peak = &p.points[p.peak_layer()];
                let canon = &p.points[s.l_star];
                forest.push(vec![
                    s.model.clone(),
                    pair.to_string(),
                    contrast.to_string(),
                    peak.layer.to_string(),
                    num(peak.beta_boot),
                    num(peak.ci_low),
                    num(peak.ci_high),
                    num(peak.beta_ols),
                    s.l_star.to_string(),
                    num(canon.beta_boot),
                    num(canon.ci_low),
                    num(canon.ci_high),
                    num(canon.beta_ols),
                    num(canon.q),
                ]);
                robust.extend([
                    num(peak.beta_ols),
                    num(canon.beta_ols),
                    num(p.median()),
                    num(p.pct_sig()),
                ]);
            }
            robustness.push(robust);
        }
    }
    put("forest.csv".into(), csv_bytes(&FOREST_COLUMNS, forest)?)?;
    put("robustness.csv".into(), csv_bytes(&ROBUSTNESS_COLUMNS, robustness)?)?;

    let patch_rows = verdict
        .patch_results
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.site.to_string(),
                r.pair.to_string(),
                r.layer.to_string(),
                num(r.delta_beta),
                num(r.boot_mean),
                num(r.ci_low),
                num(r.ci_high),
                r.n_items.to_string(),
                r.control_pass.map(|b| b.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    put("patch_forest.csv".into(), csv_bytes(&PATCH_FOREST_COLUMNS, patch_rows)?)?;

    let mut json = serde_json::to_vec_pretty(verdict)?;
    json.push(b'\n');
    put("verdict.json".into(), json)?;
    Ok(written)
}
