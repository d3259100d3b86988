use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use whprobe::effects::{CovarianceFlavor, EffectsConfig, PValueReference};
use whprobe::patchlab::PatchSite;
use whprobe::probe::ProbeConfig;
use whprobe::stimgen::SubjectMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Stimuli,
    Verify,
    Train,
    Effects,
    Report,
    PatchPlan,
    PatchScore,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Stimuli,
        Stage::Verify,
        Stage::Train,
        Stage::Effects,
        Stage::Report,
        Stage::PatchPlan,
        Stage::PatchScore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stimuli => "stimuli",
            Stage::Verify => "verify",
            Stage::Train => "train",
            Stage::Effects => "effects",
            Stage::Report => "report",
            Stage::PatchPlan => "patch-plan",
            Stage::PatchScore => "patch-score",
        }
    }
}

/// Inputs produced outside this tool for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    /// Activation store of the stimulus set.
    pub stimulus_store: PathBuf,
    /// Activation store of the probe-training treebank.
    #[serde(default)]
    pub corpus_store: Option<PathBuf>,
    /// Gold CoNLL-U of the probe-training treebank.
    #[serde(default)]
    pub corpus_conllu: Option<PathBuf>,
    /// Patched-run stores, one per patch site.
    #[serde(default)]
    pub patched_stores: BTreeMap<PatchSite, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Lexicon JSON; the built-in lexicon when absent.
    pub lexicon: Option<PathBuf>,
    pub subject_mode: SubjectMode,
    pub n_items: usize,
    /// Drives item sampling, probe initialization and bootstrap streams.
    pub seed: u64,
    /// CoNLL-U parses of the stimuli; `<out_dir>/stimuli.conllu` when absent.
    pub stimulus_parses: Option<PathBuf>,
    pub probe: ProbeConfig,
    /// Share of the treebank held out for probe quality.
    pub eval_fraction: f64,
    pub min_spearman_len: usize,
    pub alpha: f64,
    pub bootstrap_n: usize,
    pub covariance: CovarianceFlavor,
    pub p_reference: PValueReference,
    pub models: Vec<ModelConfig>,
    /// Stages executed by `run`, in pipeline order.
    pub stages: Vec<Stage>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lexicon: None,
            subject_mode: SubjectMode::Disjoint,
            n_items: 1000,
            seed: 0,
            stimulus_parses: None,
            probe: ProbeConfig::default(),
            eval_fraction: 0.1,
            min_spearman_len: 5,
            alpha: 0.05,
            bootstrap_n: 1000,
            covariance: CovarianceFlavor::Cr1,
            p_reference: PValueReference::T,
            models: Vec::new(),
            stages: Stage::ALL.to_vec(),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = cfg.lexicon.as_mut() {
            rebase(base, p);
        }
        if let Some(p) = cfg.stimulus_parses.as_mut() {
            rebase(base, p);
        }
        rebase(base, &mut cfg.out_dir);
        for m in &mut cfg.models {
            rebase(base, &mut m.stimulus_store);
            for p in [m.corpus_store.as_mut(), m.corpus_conllu.as_mut()]
                .into_iter()
                .flatten()
            {
                rebase(base, p);
            }
            for p in m.patched_stores.values_mut() {
                rebase(base, p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!("alpha must lie in (0, 1), got {}", self.alpha);
        }
        if self.bootstrap_n == 0 {
            bail!("bootstrap_n must be positive");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            bail!("eval_fraction must lie in [0, 1), got {}", self.eval_fraction);
        }
        let mut ids: Vec<&str> = self.models.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            bail!("model `{}` is listed twice", w[0]);
        }
        Ok(())
    }

    pub fn effects_config(&self) -> EffectsConfig {
        EffectsConfig {
            alpha: self.alpha,
            n_resamples: self.bootstrap_n,
            seed: self.seed,
            covariance: self.covariance,
            p_reference: self.p_reference,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.seed,
            ..self.probe.clone()
        }
    }

    pub fn stimulus_parses_path(&self) -> PathBuf {
        self.stimulus_parses
            .clone()
            .unwrap_or_else(|| self.out_dir.join("stimuli.conllu"))
    }
}
