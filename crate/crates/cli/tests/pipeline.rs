use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn whprobe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_whprobe"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = whprobe(dir, args);
    assert!(
        out.status.success(),
        "whprobe {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, snippet: &Value, extra: Value) -> PathBuf {
    let mut cfg = snippet.clone();
    let obj = cfg.as_object_mut().unwrap();
    for (k, v) in extra.as_object().unwrap() {
        obj.insert(k.clone(), v.clone());
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.components().any(|c| c.as_os_str() == ".stamps") {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["stimuli", "--out-dir", "out", "--n-items", "120"]);
    let dump = ok(
        dir,
        &["synth", "dump", "--stimuli", "out/stimuli.jsonl", "--out", "synth"],
    );
    let snippet: Value = serde_json::from_slice(&dump.stdout).unwrap();
    let cfg = write_config(
        dir,
        &snippet,
        json!({
            "n_items": 120,
            "out_dir": "out",
            "bootstrap_n": 200,
            "probe": { "rank": 16, "batch_size": 32 },
            "stages": ["stimuli", "verify", "train", "effects", "report", "patch-plan"],
        }),
    );
    let cfg_s = cfg.to_str().unwrap();
    let run = ok(dir, &["run", "--config", cfg_s]);
    assert!(String::from_utf8_lossy(&run.stdout).contains("verdict: PASS"));

    let quality: Value =
        serde_json::from_slice(&fs::read(dir.join("out/probes/synthetic/quality.json")).unwrap()).unwrap();
    for q in quality.as_array().unwrap() {
        assert!(q["uuas"].as_f64().unwrap() > 0.9, "{q}");
    }
    let verdict: Value = serde_json::from_slice(&fs::read(dir.join("out/reports/verdict.json")).unwrap()).unwrap();
    let l_star = verdict["summaries"][0]["l_star"].as_u64().unwrap();
    assert!((1..=3).contains(&l_star), "L* = {l_star} is not a planted layer");

    let mut snippet = snippet;
    let mut patched = serde_json::Map::new();
    for site in ["embedded_subject_first_subword", "wh_first_subword"] {
        let plan = format!("out/patch/synthetic/plan_{site}.json");
        let out = format!("synth/patched_{site}");
        ok(
            dir,
            &[
                "synth",
                "patch",
                "--plan",
                &plan,
                "--store",
                "synth/stimulus_store",
                "--out",
                &out,
            ],
        );
        patched.insert(site.to_string(), json!(out));
    }
    snippet["models"][0]["patched_stores"] = Value::Object(patched);
    write_config(
        dir,
        &snippet,
        json!({ "n_items": 120, "out_dir": "out", "bootstrap_n": 200, "probe": { "rank": 16, "batch_size": 32 } }),
    );
    let score = ok(dir, &["patch-score", "--config", cfg_s]);
    assert!(String::from_utf8_lossy(&score.stdout).contains("verdict: PASS"));
    let results: Value =
        serde_json::from_slice(&fs::read(dir.join("out/patch/synthetic/results.json")).unwrap()).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 4);
    let forest = fs::read_to_string(dir.join("out/reports/patch_forest.csv")).unwrap();
    assert_eq!(forest.lines().count(), 5);

    // a second full run is a no-op and leaves every artifact byte-identical
    let before = tree_bytes(&dir.join("out"));
    let again = ok(dir, &["run", "--config", cfg_s]);
    let log = String::from_utf8_lossy(&again.stderr);
    for stage in ["stimuli", "verify", "train-synthetic", "effects-synthetic", "report"] {
        assert!(
            log.contains(&format!("{stage}: inputs unchanged, skipping")),
            "{stage} re-ran:\n{log}"
        );
    }
    assert_eq!(before, tree_bytes(&dir.join("out")));
}

#[test]
fn default_item_count_gives_three_thousand_lines_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["stimuli", "--out-dir", "a", "--seed", "7"]);
    ok(tmp.path(), &["stimuli", "--out-dir", "b", "--seed", "7"]);
    let a = fs::read(tmp.path().join("a/stimuli.jsonl")).unwrap();
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 3000);
    assert_eq!(a, fs::read(tmp.path().join("b/stimuli.jsonl")).unwrap());
    ok(tmp.path(), &["stimuli", "--out-dir", "c", "--seed", "8"]);
    assert_ne!(a, fs::read(tmp.path().join("c/stimuli.jsonl")).unwrap());
}

#[test]
fn verify_without_parses_names_the_extractor_step() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["stimuli", "--out-dir", "out", "--n-items", "5"]);
    let out = whprobe(tmp.path(), &["verify", "--out-dir", "out"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("parse_stimuli"), "{err}");
}

#[test]
fn effects_without_store_names_the_dump_step() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["stimuli", "--out-dir", "out", "--n-items", "5"]);
    fs::create_dir_all(dir.join("out/verify")).unwrap();
    fs::write(dir.join("out/verify/verdicts.jsonl"), "").unwrap();
    let cfg = write_config(
        dir,
        &json!({}),
        json!({ "out_dir": "out", "models": [{ "id": "m", "stimulus_store": "nowhere" }] }),
    );
    let out = whprobe(dir, &["effects", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dump_activations"));
}

#[test]
fn failing_verdict_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["stimuli", "--out-dir", "out", "--n-items", "60"]);
    // no plant: no finite-condition effect anywhere
    fs::write(
        dir.join("spec.json"),
        r#"{"model_id": "flat", "plant": [0.0, 0.0, 0.0]}"#,
    )
    .unwrap();
    let dump = ok(
        dir,
        &[
            "synth",
            "dump",
            "--stimuli",
            "out/stimuli.jsonl",
            "--out",
            "synth",
            "--spec",
            "spec.json",
            "--corpus-sentences",
            "200",
        ],
    );
    let snippet: Value = serde_json::from_slice(&dump.stdout).unwrap();
    let cfg = write_config(
        dir,
        &snippet,
        json!({
            "n_items": 60,
            "out_dir": "out",
            "bootstrap_n": 100,
            "probe": { "rank": 16, "batch_size": 32 },
            "stages": ["stimuli", "verify", "train", "effects", "report"],
        }),
    );
    let out = whprobe(dir, &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("verdict: FAIL"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &json!({}), json!({ "n_itmes": 5 }));
    let out = whprobe(tmp.path(), &["stimuli", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_itmes"));
}
