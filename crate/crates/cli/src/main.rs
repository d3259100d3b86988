mod config;
mod stages;
mod stamp;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use whprobe::patchlab;
use whprobe::stimgen;
use whprobe::store::{self, write_bytes_atomic};
use whprobe::synthetic::{self, SyntheticModel, SyntheticSpec};
use whprobe::udtree;

use config::{RunConfig, Stage};

/// Exit status when the pipeline ran but the verdict failed.
const EXIT_VERDICT_FAIL: u8 = 2;

#[derive(Parser)]
#[command(name = "whprobe", version, about = "Structural-probe analysis of wh-dependencies")]
struct Cli {
    #[command(flatten)]
    global: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override keys of the config file.
#[derive(Args)]
struct Overrides {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    n_items: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    bootstrap_n: Option<usize>,
    #[arg(long, global = true)]
    lexicon: Option<PathBuf>,
    #[arg(long, global = true)]
    stimulus_parses: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the stimulus set.
    Stimuli,
    /// Check parses of the stimuli for distance invariance.
    Verify,
    /// Train one probe per layer and model.
    Train,
    /// Regress probe distances on condition.
    Effects,
    /// Layer profiles, forest tables and the verdict.
    Report,
    /// Write activation-patching plans at L*.
    PatchPlan,
    /// Score patched stores and refresh the report.
    PatchScore,
    /// Run the configured stages in order.
    Run,
    /// Synthetic model standing in for the extractor.
    #[command(subcommand)]
    Synth(Synth),
}

#[derive(Subcommand)]
enum Synth {
    /// Write stimulus and treebank stores plus their parses.
    Dump {
        #[arg(long)]
        stimuli: PathBuf,
        /// Directory for the stores and CoNLL-U files.
        #[arg(long)]
        out: PathBuf,
        /// Synthetic model spec (JSON); built-in defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long, default_value_t = 500)]
        corpus_sentences: usize,
    },
    /// Emulate the patched forward pass for a plan.
    Patch {
        #[arg(long)]
        plan: PathBuf,
        /// Unpatched stimulus store.
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = &o.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = o.n_items {
        cfg.n_items = v;
    }
    if let Some(v) = o.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = o.bootstrap_n {
        cfg.bootstrap_n = v;
    }
    if let Some(v) = &o.lexicon {
        cfg.lexicon = Some(v.clone());
    }
    if let Some(v) = &o.stimulus_parses {
        cfg.stimulus_parses = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth_dump(
    stimuli_path: &Path,
    out: &Path,
    spec_path: Option<&Path>,
    model_id: Option<String>,
    corpus_sentences: usize,
    seed: u64,
) -> Result<()> {
    let mut spec: SyntheticSpec = match spec_path {
        Some(p) => {
            serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        },
    };
    if let Some(id) = model_id {
        spec.model_id = id;
    }
    let f = File::open(stimuli_path).with_context(|| format!("opening {}", stimuli_path.display()))?;
    let stimuli = stimgen::read_stimuli_jsonl(BufReader::new(f))?;
    let model = SyntheticModel::new(spec.clone())?;

    let stim_store = out.join("stimulus_store");
    store::write_store(&stim_store, &model.stimulus_store(&stimuli)?)?;
    let parses: Vec<_> = stimuli.iter().map(synthetic::reference_parse).collect();
    let mut conllu = Vec::new();
    udtree::write_conllu(&mut conllu, &parses)?;
    let stim_conllu = out.join("stimuli.conllu");
    write_bytes_atomic(&stim_conllu, &conllu)?;

    let max_len = (spec.k + 1).min(16);
    let (corpus, corpus_store) = model.corpus(corpus_sentences, 5.min(max_len)..=max_len, spec.seed ^ 0x5eed)?;
    let corpus_dir = out.join("corpus_store");
    store::write_store(&corpus_dir, &corpus_store)?;
    let mut conllu = Vec::new();
    udtree::write_conllu(&mut conllu, &corpus)?;
    let corpus_conllu = out.join("corpus.conllu");
    write_bytes_atomic(&corpus_conllu, &conllu)?;

    let snippet = serde_json::json!({
        "stimulus_parses": stim_conllu,
        "models": [{
            "id": spec.model_id,
            "stimulus_store": stim_store,
            "corpus_store": corpus_dir,
            "corpus_conllu": corpus_conllu,
        }],
    });
    println!("{}", serde_json::to_string_pretty(&snippet)?);
    Ok(())
}

fn synth_patch(plan: &Path, store_dir: &Path, out: &Path) -> Result<()> {
    let plan = patchlab::load_plan(plan)?;
    let target = store::read_store(store_dir)?;
    let patched = synthetic::patched_store(&target, &target, &plan)?;
    store::write_store(out, &patched)?;
    log::info!(
        "patched {} stimuli at layer {} ({}) into {}",
        plan.entries.len(),
        plan.layer,
        plan.site,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let stages: Vec<Stage> = match cli.command {
        Command::Synth(Synth::Dump {
            stimuli,
            out,
            spec,
            model_id,
            corpus_sentences,
        }) => {
            synth_dump(
                &stimuli,
                &out,
                spec.as_deref(),
                model_id,
                corpus_sentences,
                cli.global.seed.unwrap_or(0),
            )?;
            return Ok(ExitCode::SUCCESS);
        }
        Command::Synth(Synth::Patch { plan, store, out }) => {
            synth_patch(&plan, &store, &out)?;
            return Ok(ExitCode::SUCCESS);
        }
        Command::Stimuli => vec![Stage::Stimuli],
        Command::Verify => vec![Stage::Verify],
        Command::Train => vec![Stage::Train],
        Command::Effects => vec![Stage::Effects],
        Command::Report => vec![Stage::Report],
        Command::PatchPlan => vec![Stage::PatchPlan],
        Command::PatchScore => vec![Stage::PatchScore],
        Command::Run => load_config(&cli.global)?.stages,
    };
    let cfg = load_config(&cli.global)?;
    let mut verdict = None;
    for stage in stages {
        let outcome = stages::run_stage(stage, &cfg).with_context(|| format!("stage `{}`", stage.name()))?;
        if outcome.verdict.is_some() {
            verdict = outcome.verdict;
        }
    }
    match verdict {
        Some(v) => {
            println!("verdict: {}", if v.pass { "PASS" } else { "FAIL" });
            for m in &v.models {
                println!(
                    "  {}: {} (L* = {})",
                    m.model,
                    if m.pass { "pass" } else { "fail" },
                    m.l_star
                );
            }
            Ok(if v.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERDICT_FAIL)
            })
        }
        None => Ok(ExitCode::SUCCESS),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
