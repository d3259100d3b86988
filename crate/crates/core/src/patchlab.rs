//! Activation-patching plans and Δβ scoring.
//!
//! A plan tells the extractor, per item, which token of the bare (target)
//! stimulus to overwrite at layer `L*` with which token of the infinitival
//! (source) stimulus. Scoring compares probe distances in the patched store
//! against the unpatched target store.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::effects::bootstrap_mean;
use crate::error::{io_at, Error, Result};
use crate::labels::{Condition, Pair, Role, StimulusKey};
use crate::probe::ProbeMatrix;
use crate::stimgen::Stimulus;
use crate::store::{write_bytes_atomic, ActivationStore, AlignmentMap};
use crate::udtree::VerdictTable;

/// `|Δβ|` at or below this passes the wh-position control.
pub const CONTROL_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSite {
    EmbeddedSubjectFirstSubword,
    WhFirstSubword,
}

impl PatchSite {
    pub const ALL: [PatchSite; 2] = [PatchSite::EmbeddedSubjectFirstSubword, PatchSite::WhFirstSubword];

    pub fn role(self) -> Role {
        match self {
            PatchSite::EmbeddedSubjectFirstSubword => Role::EmbeddedSubject,
            PatchSite::WhFirstSubword => Role::Wh,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PatchSite::EmbeddedSubjectFirstSubword => "embedded_subject_first_subword",
            PatchSite::WhFirstSubword => "wh_first_subword",
        }
    }

    pub fn is_control(self) -> bool {
        self == PatchSite::WhFirstSubword
    }
}

impl std::fmt::Display for PatchSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PatchSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatchSite::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Patch(format!("unknown patch site `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub item_id: u32,
    pub source_key: String,
    pub target_key: String,
    /// Token (subword) index in the target stimulus to overwrite.
    pub target_token: usize,
    /// Token index in the source stimulus whose vector is copied.
    pub source_token: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub model: String,
    pub layer: usize,
    pub source_condition: Condition,
    pub target_condition: Condition,
    pub site: PatchSite,
    pub entries: Vec<PatchEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedItem {
    pub item_id: u32,
    pub reason: String,
}

fn first_subword(alignment: &AlignmentMap, key: &str, word: usize) -> std::result::Result<usize, String> {
    let spans = alignment.get(key).ok_or_else(|| format!("no alignment for `{key}`"))?;
    let span = spans
        .get(word)
        .ok_or_else(|| format!("`{key}` has {} aligned words, tagged word {word} missing", spans.len()))?;
    if span.subword_count == 0 {
        return Err(format!("tagged word {word} of `{key}` has no subword"));
    }
    Ok(span.first_subword as usize)
}

/// Builds the infinitival → bare plan at `layer` for `site`.
///
/// Items need both conditions in `stimuli`, a passing invariance verdict for
/// both pairs, and an alignment of the site word in both stimuli; anything
/// else is dropped with a reason.
pub fn make_patch_plan(
    model: &str,
    stimuli: &[Stimulus],
    alignment: &AlignmentMap,
    verdicts: &VerdictTable,
    layer: usize,
    site: PatchSite,
) -> (PatchPlan, Vec<DroppedItem>) {
    let source_condition = Condition::Infinitival;
    let target_condition = Condition::Bare;
    let mut by_item: BTreeMap<u32, [Option<&Stimulus>; 3]> = BTreeMap::new();
    for s in stimuli {
        by_item.entry(s.item_id).or_default()[s.condition.index()] = Some(s);
    }
    let mut entries = Vec::new();
    let mut dropped = Vec::new();
    for (item_id, slots) in by_item {
        let entry = (|| {
            if let Some(pair) = Pair::ALL.into_iter().find(|&p| !verdicts.passes(item_id, p)) {
                return Err(format!("fails the {pair} invariance check"));
            }
            let source = slots[source_condition.index()].ok_or_else(|| format!("no {source_condition} stimulus"))?;
            let target = slots[target_condition.index()].ok_or_else(|| format!("no {target_condition} stimulus"))?;
            let source_key = source.key().to_string();
            let target_key = target.key().to_string();
            let role = site.role();
            Ok(PatchEntry {
                item_id,
                source_token: first_subword(alignment, &source_key, source.positions.get(role))?,
                target_token: first_subword(alignment, &target_key, target.positions.get(role))?,
                source_key,
                target_key,
            })
        })();
        match entry {
            Ok(e) => entries.push(e),
            Err(reason) => {
                log::warn!("patch plan ({site}): dropping item {item_id}: {reason}");
                dropped.push(DroppedItem { item_id, reason });
            }
        }
    }
    (
        PatchPlan {
            model: model.to_string(),
            layer,
            source_condition,
            target_condition,
            site,
            entries,
        },
        dropped,
    )
}

pub fn save_plan(path: &Path, plan: &PatchPlan) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(plan)?;
    bytes.push(b'\n');
    write_bytes_atomic(path, &bytes)
}

pub fn load_plan(path: &Path) -> Result<PatchPlan> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    pub model: String,
    pub site: PatchSite,
    pub pair: Pair,
    pub layer: usize,
    /// Mean over items of `d_patched − d_target`.
    pub delta_beta: f64,
    pub boot_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_items: usize,
    /// Set for the wh-position control only.
    pub control_pass: Option<bool>,
}

impl PatchResult {
    pub fn ci_excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

/// Checks that every layer below the plan's layer is bit-identical between
/// the patched and target stores for every planned stimulus.
pub fn check_patch_integrity(plan: &PatchPlan, patched: &ActivationStore, target: &ActivationStore) -> Result<()> {
    for e in &plan.entries {
        for (name, store) in [("patched", patched), ("target", target)] {
            if store.position(&e.target_key).is_none() {
                return Err(Error::Patch(format!(
                    "item {}: `{}` missing from the {name} store",
                    e.item_id, e.target_key
                )));
            }
        }
        if patched.word_spans(&e.target_key)? != target.word_spans(&e.target_key)? {
            return Err(Error::Patch(format!(
                "`{}` is aligned differently in the patched and target stores",
                e.target_key
            )));
        }
        for layer in 0..plan.layer {
            if !patched.rows_bit_identical(target, layer, &e.target_key)? {
                return Err(Error::Patch(format!(
                    "`{}` differs from the target run at layer {layer} < {}: the patch hook fired too early",
                    e.target_key, plan.layer
                )));
            }
        }
    }
    Ok(())
}

/// Δβ for `pair`: per-item probe distance in the patched store minus the
/// unpatched target store, at the plan's layer, with an item bootstrap.
#[allow(clippy::too_many_arguments)]
pub fn compute_delta_beta(
    plan: &PatchPlan,
    stimuli: &[Stimulus],
    patched: &ActivationStore,
    target: &ActivationStore,
    probe: &ProbeMatrix,
    pair: Pair,
    n_resamples: usize,
    seed: u64,
) -> Result<PatchResult> {
    if probe.layer != plan.layer {
        return Err(Error::Patch(format!(
            "probe is for layer {}, plan patches layer {}",
            probe.layer, plan.layer
        )));
    }
    if plan.entries.is_empty() {
        return Err(Error::Patch("plan has no entries".into()));
    }
    check_patch_integrity(plan, patched, target)?;
    let by_key: BTreeMap<String, &Stimulus> = stimuli.iter().map(|s| (s.key().to_string(), s)).collect();
    let (ra, rb) = pair.roles();
    let layer = plan.layer;
    let mut diffs = Vec::with_capacity(plan.entries.len());
    for e in &plan.entries {
        let s = by_key
            .get(&e.target_key)
            .ok_or_else(|| Error::Patch(format!("`{}` is not in the stimulus set", e.target_key)))?;
        let (wa, wb) = (s.positions.get(ra), s.positions.get(rb));
        let d = |store: &ActivationStore| -> Result<f64> {
            probe.distance_raw(
                &store.word_vector(layer, &e.target_key, wa)?,
                &store.word_vector(layer, &e.target_key, wb)?,
            )
        };
        diffs.push(d(patched)? - d(target)?);
    }
    let delta_beta = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let boot = bootstrap_mean(&diffs, n_resamples, seed)?;
    Ok(PatchResult {
        model: plan.model.clone(),
        site: plan.site,
        pair,
        layer,
        delta_beta,
        boot_mean: boot.mean,
        ci_low: boot.ci_low,
        ci_high: boot.ci_high,
        n_items: diffs.len(),
        control_pass: plan.site.is_control().then_some(delta_beta.abs() <= CONTROL_THRESHOLD),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchVerdict {
    pub model: String,
    pub delta_beta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub control_delta_beta: f64,
    pub control_pass: bool,
    pub pass: bool,
    pub reason: String,
}

/// Causal verdict for one model: the embedded-subject patch raises the
/// wh–esubj distance with a CI excluding zero, and the wh-position control
/// stays within [`CONTROL_THRESHOLD`].
pub fn patch_verdict(results: &[PatchResult]) -> Result<PatchVerdict> {
    let find = |site: PatchSite| {
        results
            .iter()
            .find(|r| r.site == site && r.pair == Pair::WhEsubj)
            .ok_or_else(|| Error::Patch(format!("no {site} result on wh_esubj")))
    };
    let main = find(PatchSite::EmbeddedSubjectFirstSubword)?;
    let control = find(PatchSite::WhFirstSubword)?;
    let effect_ok = main.delta_beta > 0.0 && main.ci_low > 0.0;
    let control_pass = control.delta_beta.abs() <= CONTROL_THRESHOLD;
    let reason = match (effect_ok, control_pass) {
        (true, true) => "pass".to_string(),
        (false, _) if main.delta_beta <= 0.0 => format!("Δβ = {:+.4} is not positive", main.delta_beta),
        (false, _) => format!("95% CI [{:.4}, {:.4}] includes zero", main.ci_low, main.ci_high),
        (true, false) => format!(
            "control |Δβ| = {:.4} exceeds {CONTROL_THRESHOLD}",
            control.delta_beta.abs()
        ),
    };
    Ok(PatchVerdict {
        model: main.model.clone(),
        delta_beta: main.delta_beta,
        ci_low: main.ci_low,
        ci_high: main.ci_high,
        control_delta_beta: control.delta_beta,
        control_pass,
        pass: effect_ok && control_pass,
        reason,
    })
}

/// Target keys of a plan, for the extractor or for building patched stores.
pub fn plan_targets(plan: &PatchPlan) -> Vec<StimulusKey> {
    plan.entries.iter().filter_map(|e| e.target_key.parse().ok()).collect()
}
