use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use whprobe::effects::{self, derive_seed, EffectRow};
use whprobe::labels::Pair;
use whprobe::patchlab::{self, PatchResult, PatchSite, PatchVerdict};
use whprobe::probe::{self, ProbeMatrix, ProbeQuality};
use whprobe::reporting::{self, model_slug, RunVerdict};
use whprobe::stimgen::{self, Lexicon, Stimulus};
use whprobe::store::{self, write_bytes_atomic, ActivationStore};
use whprobe::udtree::{self, Exclusion, InvarianceVerdict, VerdictTable};

use crate::config::{ModelConfig, RunConfig, Stage};
use crate::stamp::{self, Fingerprint};

/// What a stage run left behind for the exit status.
#[derive(Debug, Default)]
pub struct Outcome {
    pub verdict: Option<RunVerdict>,
}

struct Layout<'a> {
    out: &'a Path,
}

impl Layout<'_> {
    fn stimuli(&self) -> PathBuf {
        self.out.join("stimuli.jsonl")
    }
    fn verdicts(&self) -> PathBuf {
        self.out.join("verify").join("verdicts.jsonl")
    }
    fn exclusions(&self) -> PathBuf {
        self.out.join("verify").join("exclusions.jsonl")
    }
    fn probes(&self, model: &str) -> PathBuf {
        self.out.join("probes").join(model_slug(model))
    }
    fn effects_json(&self, model: &str) -> PathBuf {
        self.out.join("effects").join(format!("{}.json", model_slug(model)))
    }
    fn effects_csv(&self, model: &str) -> PathBuf {
        self.out.join("effects").join(format!("{}.csv", model_slug(model)))
    }
    fn reports(&self) -> PathBuf {
        self.out.join("reports")
    }
    fn verdict(&self) -> PathBuf {
        self.reports().join("verdict.json")
    }
    fn patch_dir(&self, model: &str) -> PathBuf {
        self.out.join("patch").join(model_slug(model))
    }
    fn plan(&self, model: &str, site: PatchSite) -> PathBuf {
        self.patch_dir(model).join(format!("plan_{}.json", site.as_str()))
    }
    fn patch_results(&self, model: &str) -> PathBuf {
        self.patch_dir(model).join("results.json")
    }
}

/// Fails with a message naming the stage or tool that produces `path`.
fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found at {}; {producer}", path.display());
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes_atomic(path, &bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    write_bytes_atomic(path, &bytes)?;
    Ok(())
}

fn read_stimuli(layout: &Layout) -> Result<Vec<Stimulus>> {
    let path = layout.stimuli();
    require(&path, "stimulus set", "run the `stimuli` stage first")?;
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(stimgen::read_stimuli_jsonl(BufReader::new(f))?)
}

fn read_verdicts(layout: &Layout) -> Result<Vec<InvarianceVerdict>> {
    let path = layout.verdicts();
    require(&path, "invariance verdicts", "run the `verify` stage first")?;
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(udtree::read_verdicts_jsonl(BufReader::new(f))?)
}

fn read_stimulus_store(m: &ModelConfig) -> Result<ActivationStore> {
    require(
        &m.stimulus_store,
        &format!("model `{}`: stimulus activation store", m.id),
        "produce it with the extractor's dump step (dump_activations) on stimuli.jsonl",
    )?;
    store::read_store(&m.stimulus_store)
        .with_context(|| format!("model `{}`: reading {}", m.id, m.stimulus_store.display()))
}

fn lexicon(cfg: &RunConfig) -> Result<Lexicon> {
    match &cfg.lexicon {
        Some(p) => Ok(Lexicon::load(p)?),
        None => Ok(Lexicon::with_mode(cfg.subject_mode)),
    }
}

/// Skips `body` when the stamp `name` matches `inputs`; otherwise runs it
/// and records its outputs.
fn stamped(out: &Path, name: &str, inputs: &Fingerprint, body: impl FnOnce() -> Result<Vec<PathBuf>>) -> Result<()> {
    let hash = inputs.finish();
    if stamp::up_to_date(out, name, &hash) {
        info!("{name}: inputs unchanged, skipping");
        return Ok(());
    }
    let outputs = body()?;
    stamp::record(out, name, &hash, &outputs)
}

pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let layout = Layout { out: &cfg.out_dir };
    fs::create_dir_all(layout.out).with_context(|| format!("creating {}", layout.out.display()))?;
    info!("stage {}", stage.name());
    match stage {
        Stage::Stimuli => stimuli(cfg, &layout).map(|_| Outcome::default()),
        Stage::Verify => verify(cfg, &layout).map(|_| Outcome::default()),
        Stage::Train => {
            for m in &cfg.models {
                train(cfg, &layout, m)?;
            }
            Ok(Outcome::default())
        }
        Stage::Effects => {
            for m in &cfg.models {
                effects_stage(cfg, &layout, m)?;
            }
            Ok(Outcome::default())
        }
        Stage::Report => report(cfg, &layout),
        Stage::PatchPlan => {
            for m in &cfg.models {
                patch_plan(cfg, &layout, m)?;
            }
            Ok(Outcome::default())
        }
        Stage::PatchScore => {
            for m in &cfg.models {
                patch_score(cfg, &layout, m)?;
            }
            report(cfg, &layout)
        }
    }
}

fn stimuli(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let lex = lexicon(cfg)?;
    let mut fp = Fingerprint::new("stimuli");
    fp.json(&lex)?.json(&(cfg.n_items, cfg.seed))?;
    stamped(layout.out, "stimuli", &fp, || {
        let set = stimgen::build_stimulus_set(&lex, cfg.n_items, cfg.seed)?;
        let mut bytes = Vec::new();
        stimgen::write_stimuli_jsonl(&mut bytes, &set)?;
        let path = layout.stimuli();
        write_bytes_atomic(&path, &bytes)?;
        info!("wrote {} stimuli to {}", set.len(), path.display());
        Ok(vec![path])
    })
}

#[derive(Serialize, Deserialize)]
struct VerifySummary {
    n_items: usize,
    excluded: usize,
    passing: BTreeMap<Pair, usize>,
}

fn verify(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let parses_path = cfg.stimulus_parses_path();
    require(&layout.stimuli(), "stimulus set", "run the `stimuli` stage first")?;
    require(
        &parses_path,
        "CoNLL-U parses of the stimuli",
        "run the extractor's parse step (parse_stimuli) on stimuli.jsonl, or set `stimulus_parses`",
    )?;
    let mut fp = Fingerprint::new("verify");
    fp.path(&layout.stimuli())?.path(&parses_path)?;
    stamped(layout.out, "verify", &fp, || {
        let stimuli = read_stimuli(layout)?;
        let text = fs::read_to_string(&parses_path)?;
        let mut parses = Vec::new();
        for (i, p) in udtree::parse_conllu_each(&text).into_iter().enumerate() {
            match p {
                Ok(p) => parses.push(p),
                Err(e) => warn!("skipping unparsable sentence #{i}: {e}"),
            }
        }
        let (verdicts, exclusions) = udtree::verify_stimulus_set(&stimuli, &parses);
        let n_items = verdicts.len() / 2 + exclusions.len();
        let mut passing = BTreeMap::new();
        for pair in Pair::ALL {
            passing.insert(pair, verdicts.iter().filter(|v| v.pair == pair && v.pass).count());
        }
        info!(
            "{n_items} items: {} excluded, wh_esubj pass {}, esubj_evb pass {}",
            exclusions.len(),
            passing[&Pair::WhEsubj],
            passing[&Pair::EsubjEvb]
        );
        write_jsonl(&layout.verdicts(), &verdicts)?;
        write_jsonl::<Exclusion>(&layout.exclusions(), &exclusions)?;
        let summary = layout.out.join("verify").join("summary.json");
        write_json(
            &summary,
            &VerifySummary {
                n_items,
                excluded: exclusions.len(),
                passing,
            },
        )?;
        Ok(vec![layout.verdicts(), layout.exclusions(), summary])
    })
}

fn train(cfg: &RunConfig, layout: &Layout, m: &ModelConfig) -> Result<()> {
    let missing =
        "produce the treebank store with the extractor's dump step (dump_activations) and set it in the model config";
    let conllu = m
        .corpus_conllu
        .as_ref()
        .ok_or_else(|| anyhow!("model `{}`: no `corpus_conllu` configured; {missing}", m.id))?;
    let corpus_store = m
        .corpus_store
        .as_ref()
        .ok_or_else(|| anyhow!("model `{}`: no `corpus_store` configured; {missing}", m.id))?;
    require(
        conllu,
        &format!("model `{}`: treebank CoNLL-U", m.id),
        "point `corpus_conllu` at the gold treebank",
    )?;
    require(
        corpus_store,
        &format!("model `{}`: treebank activation store", m.id),
        missing,
    )?;

    let probe_cfg = cfg.probe_config();
    let mut fp = Fingerprint::new("train");
    fp.path(conllu)?
        .path(corpus_store)?
        .json(&probe_cfg)?
        .json(&(cfg.eval_fraction, cfg.min_spearman_len))?;
    let dir = layout.probes(&m.id);
    stamped(layout.out, &format!("train-{}", model_slug(&m.id)), &fp, || {
        let text = fs::read_to_string(conllu)?;
        let parses = udtree::parse_conllu(&text).with_context(|| format!("parsing {}", conllu.display()))?;
        let store = store::read_store(corpus_store)?;
        let mut order: Vec<usize> = (0..parses.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[&m.id, "eval-split"],
        )));
        let n_eval = (parses.len() as f64 * cfg.eval_fraction).round() as usize;
        let (eval_idx, train_idx) = order.split_at(n_eval);
        let pick = |idx: &[usize]| idx.iter().map(|&i| parses[i].clone()).collect::<Vec<_>>();
        let (train_parses, eval_parses) = (pick(train_idx), pick(eval_idx));

        let mut written = Vec::new();
        let mut quality: Vec<ProbeQuality> = Vec::new();
        for layer in 0..store.n_layers() {
            let train_set = probe::sentences_from_store(&train_parses, &store, layer)?;
            let probe = probe::train_probe(layer, &train_set, None, &probe_cfg)
                .with_context(|| format!("model `{}` layer {layer}", m.id))?;
            written.push(probe::save_probe(&dir, &probe)?);
            written.push(dir.join(format!("{}.f32", probe::probe_file_stem(layer))));
            if !eval_parses.is_empty() {
                let eval_set = probe::sentences_from_store(&eval_parses, &store, layer)?;
                let q = probe::eval_probe(&probe, &eval_set, cfg.min_spearman_len)?;
                info!(
                    "model `{}` layer {layer}: spearman {:.3}, uuas {:.3}",
                    m.id, q.distance_spearman, q.uuas
                );
                quality.push(q);
            }
        }
        let qpath = dir.join("quality.json");
        write_json(&qpath, &quality)?;
        written.push(qpath);
        Ok(written)
    })
}

fn load_probes(layout: &Layout, m: &ModelConfig, n_layers: usize) -> Result<BTreeMap<usize, ProbeMatrix>> {
    let dir = layout.probes(&m.id);
    let missing: Vec<String> = (0..n_layers)
        .filter(|&l| !dir.join(format!("{}.json", probe::probe_file_stem(l))).exists())
        .map(|l| l.to_string())
        .collect();
    if !missing.is_empty() {
        bail!(
            "model `{}`: no probe for layer(s) {} in {}; run the `train` stage first",
            m.id,
            missing.join(", "),
            dir.display()
        );
    }
    (0..n_layers).map(|l| Ok((l, probe::load_probe(&dir, l)?))).collect()
}

fn effects_stage(cfg: &RunConfig, layout: &Layout, m: &ModelConfig) -> Result<()> {
    require(&layout.stimuli(), "stimulus set", "run the `stimuli` stage first")?;
    require(
        &layout.verdicts(),
        "invariance verdicts",
        "run the `verify` stage first",
    )?;
    let manifest = {
        read_stimulus_store(m)?;
        store::read_manifest(&m.stimulus_store)?
    };
    let probe_dir = layout.probes(&m.id);
    let probes_files = if probe_dir.exists() {
        stamp::files_in(&probe_dir)?
    } else {
        Vec::new()
    };
    let effects_cfg = cfg.effects_config();
    let mut fp = Fingerprint::new("effects");
    fp.json(&m.id)?
        .path(&layout.stimuli())?
        .path(&layout.verdicts())?
        .path(&m.stimulus_store)?
        .json(&effects_cfg)?;
    for f in &probes_files {
        fp.path(f)?;
    }
    stamped(layout.out, &format!("effects-{}", model_slug(&m.id)), &fp, || {
        let stimuli = read_stimuli(layout)?;
        let verdicts = VerdictTable::new(&read_verdicts(layout)?);
        let store = read_stimulus_store(m)?;
        let probes = load_probes(layout, m, manifest.n_layers as usize)?;
        let missing: Vec<String> = stimuli
            .iter()
            .map(|s| s.key().to_string())
            .filter(|k| store.position(k).is_none())
            .take(5)
            .collect();
        if !missing.is_empty() {
            bail!(
                "model `{}`: stimulus store lacks {} (and possibly more); re-run the extractor's dump step on the current stimuli.jsonl",
                m.id,
                missing.join(", ")
            );
        }
        let estimates = effects::assemble_estimates(&m.id, &store, &probes, &stimuli, &verdicts, &effects_cfg)?;
        let rows = effects::effect_rows(&estimates);
        let mut csv = Vec::new();
        effects::write_effects_csv(&mut csv, &rows)?;
        let csv_path = layout.effects_csv(&m.id);
        write_bytes_atomic(&csv_path, &csv)?;
        let json_path = layout.effects_json(&m.id);
        write_json(&json_path, &rows)?;
        info!("model `{}`: {} effect rows", m.id, rows.len());
        Ok(vec![csv_path, json_path])
    })
}

fn report(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let mut fp = Fingerprint::new("report");
    fp.json(&cfg.alpha)?;
    let mut rows: Vec<EffectRow> = Vec::new();
    let mut patch_results: Vec<PatchResult> = Vec::new();
    let mut patch_verdicts: Vec<PatchVerdict> = Vec::new();
    for m in &cfg.models {
        let path = layout.effects_json(&m.id);
        require(
            &path,
            &format!("model `{}`: effect table", m.id),
            "run the `effects` stage first",
        )?;
        fp.path(&path)?;
        rows.extend(effects::read_effects_json(&path)?);
        let ppath = layout.patch_results(&m.id);
        if ppath.exists() {
            fp.path(&ppath)?;
            let results: Vec<PatchResult> = read_json(&ppath)?;
            patch_verdicts.push(patchlab::patch_verdict(&results)?);
            patch_results.extend(results);
        }
    }
    stamped(layout.out, "report", &fp, || {
        let profiles = reporting::build_profiles(&rows, cfg.alpha)?;
        let summaries = reporting::summarize_all(&profiles)?;
        let verdict = reporting::run_verdict(cfg.alpha, &summaries, &patch_results, &patch_verdicts);
        for s in &summaries {
            info!(
                "model `{}`: L* = {}, gradient (peak/canon) {}/{}, esubj-evb sign asymmetry {}",
                s.model, s.l_star, s.gradient_pass_peak, s.gradient_pass_canon, s.esubj_evb_sign_asymmetry
            );
        }
        Ok(reporting::emit_reports(&layout.reports(), &profiles, &verdict)?)
    })?;
    Ok(Outcome {
        verdict: Some(read_json(&layout.verdict())?),
    })
}

fn l_star(layout: &Layout, model: &str) -> Result<usize> {
    let path = layout.verdict();
    require(&path, "run verdict", "run the `report` stage first")?;
    let v: RunVerdict = read_json(&path)?;
    v.summaries
        .iter()
        .find(|s| s.model == model)
        .map(|s| s.l_star)
        .ok_or_else(|| {
            anyhow!(
                "model `{model}` is not in {}; re-run the `report` stage",
                path.display()
            )
        })
}

fn patch_plan(_cfg: &RunConfig, layout: &Layout, m: &ModelConfig) -> Result<()> {
    require(&layout.stimuli(), "stimulus set", "run the `stimuli` stage first")?;
    require(
        &layout.verdicts(),
        "invariance verdicts",
        "run the `verify` stage first",
    )?;
    let layer = l_star(layout, &m.id)?;
    read_stimulus_store(m)?;
    let mut fp = Fingerprint::new("patch-plan");
    fp.json(&(m.id.as_str(), layer))?
        .path(&layout.stimuli())?
        .path(&layout.verdicts())?
        .path(&m.stimulus_store)?;
    stamped(layout.out, &format!("patch-plan-{}", model_slug(&m.id)), &fp, || {
        let stimuli = read_stimuli(layout)?;
        let verdicts = VerdictTable::new(&read_verdicts(layout)?);
        let alignment = store::read_store(&m.stimulus_store)?.alignment();
        let mut written = Vec::new();
        for site in PatchSite::ALL {
            let (plan, dropped) = patchlab::make_patch_plan(&m.id, &stimuli, &alignment, &verdicts, layer, site);
            info!(
                "model `{}` {site}: {} entries at layer {layer}, {} items dropped",
                m.id,
                plan.entries.len(),
                dropped.len()
            );
            let path = layout.plan(&m.id, site);
            patchlab::save_plan(&path, &plan)?;
            written.push(path);
            let dpath = layout.patch_dir(&m.id).join(format!("dropped_{}.jsonl", site.as_str()));
            write_jsonl(&dpath, &dropped)?;
            written.push(dpath);
        }
        Ok(written)
    })
}

fn patch_score(cfg: &RunConfig, layout: &Layout, m: &ModelConfig) -> Result<()> {
    require(&layout.stimuli(), "stimulus set", "run the `stimuli` stage first")?;
    let mut fp = Fingerprint::new("patch-score");
    fp.json(&(m.id.as_str(), cfg.bootstrap_n, cfg.seed))?
        .path(&layout.stimuli())?
        .path(&m.stimulus_store)?;
    let mut plans = Vec::new();
    for site in PatchSite::ALL {
        let plan_path = layout.plan(&m.id, site);
        require(
            &plan_path,
            &format!("model `{}`: {site} patch plan", m.id),
            "run the `patch-plan` stage first",
        )?;
        let store_path = m.patched_stores.get(&site).ok_or_else(|| {
            anyhow!(
                "model `{}`: no patched store configured for {site}; run the extractor's patched forward pass (run_patched_forward) on {} and set `patched_stores.{site}`",
                m.id,
                plan_path.display()
            )
        })?;
        require(
            store_path,
            &format!("model `{}`: {site} patched store", m.id),
            &format!(
                "run the extractor's patched forward pass (run_patched_forward) on {}",
                plan_path.display()
            ),
        )?;
        fp.path(&plan_path)?.path(store_path)?;
        plans.push((site, plan_path, store_path.clone()));
    }
    let plan0 = patchlab::load_plan(&plans[0].1)?;
    let probe_dir = layout.probes(&m.id);
    let probe_json = probe_dir.join(format!("{}.json", probe::probe_file_stem(plan0.layer)));
    require(
        &probe_json,
        &format!("model `{}`: probe for layer {}", m.id, plan0.layer),
        "run the `train` stage first",
    )?;
    fp.path(&probe_json)?;

    stamped(layout.out, &format!("patch-score-{}", model_slug(&m.id)), &fp, || {
        let stimuli = read_stimuli(layout)?;
        let target = read_stimulus_store(m)?;
        let mut results = Vec::new();
        for (site, plan_path, store_path) in &plans {
            let plan = patchlab::load_plan(plan_path)?;
            let probe = probe::load_probe(&probe_dir, plan.layer)?;
            let patched = store::read_store(store_path)?;
            for pair in Pair::ALL {
                let seed = derive_seed(cfg.seed, &[&m.id, "patch", site.as_str(), pair.as_str()]);
                let r = patchlab::compute_delta_beta(
                    &plan,
                    &stimuli,
                    &patched,
                    &target,
                    &probe,
                    pair,
                    cfg.bootstrap_n,
                    seed,
                )
                .with_context(|| format!("model `{}` {site} {pair}", m.id))?;
                info!(
                    "model `{}` {site} {pair}: Δβ = {:+.4} [{:.4}, {:.4}]",
                    m.id, r.delta_beta, r.ci_low, r.ci_high
                );
                results.push(r);
            }
        }
        let path = layout.patch_results(&m.id);
        write_json(&path, &results)?;
        Ok(vec![path])
    })
}
