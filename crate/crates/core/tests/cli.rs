use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use quant_unlearn::cli::config::ExperimentConfig;
use quant_unlearn::cli::main_with_args;
use quant_unlearn::cli::pipeline::{RunDir, RunsManifest, RETRAIN, TARGET};
use quant_unlearn::model::load_checkpoint;

/// A config small enough for the whole pipeline to run in seconds.
fn small_config(out: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
    v["output_dir"] = json!(out);
    v["corpus"] = json!({ "n_forget": 8, "n_retain": 16, "n_holdout": 8 });
    v["model"] = json!({ "d_model": 32, "n_layers": 1, "n_heads": 2, "d_ff": 64, "context_len": 16 });
    v["pretrain"]["steps"] = json!(150);
    v["pretrain"]["lr"] = json!(0.01);
    v["pretrain"]["batch_size"] = json!(16);
    v["gate"] = json!({ "min_vermem": 0.0, "min_utility": 0.0 });
    v["unlearn"]["groups"] = json!([
        { "methods": ["GA"], "mode": "full_ft", "lr": [1e-4], "epochs": [2], "lambda": [0.0] },
        { "methods": ["GA_GDR"], "mode": "full_ft", "lr": [1e-4], "epochs": [2], "lambda": [1.0] },
        {
            "methods": ["GA_GDR"], "mode": "lora", "lr": [3e-3], "epochs": [2], "lambda": [1.0],
            "rank": [2], "alpha_ratio": [2.0], "targets": ["all_linear"]
        }
    ]);
    v
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("quant-unlearn").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn configuration_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(cli(&["--config", s(&missing), "pretrain"]), 2);
    assert_eq!(cli(&["pretrain"]), 2);
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["--jobs", "many", "report"]), 2);

    let mut v = small_config(&dir.path().join("out"));
    v["surprise"] = json!(1);
    assert_eq!(cli(&["--config", s(&write_config(dir.path(), &v)), "pretrain"]), 2);

    let mut v = small_config(&dir.path().join("out"));
    v["unlearn"]["groups"][0]["lambda"] = json!([1.0]);
    assert_eq!(cli(&["--config", s(&write_config(dir.path(), &v)), "pretrain"]), 2);

    let mut v = small_config(&dir.path().join("out"));
    v["quant"] = json!([{ "bits": 12, "grouping": "per_row" }]);
    assert_eq!(cli(&["--config", s(&write_config(dir.path(), &v)), "pretrain"]), 2);

    assert_eq!(cli(&["--help"]), 0);
}

#[test]
fn an_undertrained_target_fails_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut v = small_config(&out);
    v["pretrain"]["steps"] = json!(1);
    v["gate"] = json!({ "min_vermem": 90.0, "min_utility": 50.0 });
    assert_eq!(cli(&["--config", s(&write_config(dir.path(), &v)), "pretrain"]), 4);
    // The checkpoint is still written for inspection.
    assert!(RunDir::new(&out).checkpoint(TARGET).exists());
}

#[test]
fn diverging_runs_exit_with_three_and_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut v = small_config(&out);
    v["unlearn"]["groups"][0]["lr"] = json!([1e200]);
    let cfg = write_config(dir.path(), &v);
    let c = s(&cfg);
    assert_eq!(cli(&["--config", c, "pretrain"]), 0);
    assert_eq!(cli(&["--config", c, "unlearn", "--method", "ga", "--mode", "full_ft"]), 3);
    let m: RunsManifest = serde_json::from_str(&fs::read_to_string(RunDir::new(&out).runs_manifest()).unwrap()).unwrap();
    assert_eq!(m.diverged().len(), 1);

    assert_eq!(cli(&["--config", c, "run"]), 3);
    let report = fs::read_to_string(RunDir::new(&out).report("csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("GA,") && l.contains("diverged")), "{report}");
    assert!(report.lines().any(|l| l.starts_with("GA_GDR,") && !l.contains("diverged")));
}

#[test]
fn pipeline_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &small_config(&out));
    let c = s(&cfg);
    let run = RunDir::new(&out);
    assert_eq!(cli(&["--config", c, "--jobs", "2", "run"]), 0);

    let report_csv = fs::read(run.report("csv")).unwrap();
    let report_json = fs::read(run.report("json")).unwrap();
    assert_eq!(cli(&["--out", s(&out), "report"]), 0);
    assert_eq!(fs::read(run.report("csv")).unwrap(), report_csv);
    assert_eq!(fs::read(run.report("json")).unwrap(), report_json);

    let manifest: RunsManifest = serde_json::from_str(&fs::read_to_string(run.runs_manifest()).unwrap()).unwrap();
    let lora = manifest.runs.iter().find(|r| r.id.contains("_lora_")).unwrap().id.clone();
    let adapters = run.adapters(&lora);
    assert_ne!(cli(&["quantize", "--checkpoint", s(&adapters), "--bits", "4"]), 0);

    let merged = dir.path().join("merged.json");
    assert_eq!(cli(&["merge", "--adapters", s(&adapters), "--output", s(&merged)]), 0);
    let from_run = load_checkpoint(&run.checkpoint(&lora)).unwrap();
    let from_cmd = load_checkpoint(&merged).unwrap();
    assert_eq!(from_cmd.params, from_run.params);

    assert_eq!(cli(&["quantize", "--checkpoint", s(&merged), "--bits", "4", "--group", "8"]), 0);
    let quantized = load_checkpoint(&dir.path().join("merged.int4-g8.json")).unwrap();
    assert_eq!(quantized.params["tok_emb"], from_cmd.params["tok_emb"]);
    assert_ne!(quantized.params["lm_head.weight"], from_cmd.params["lm_head.weight"]);

    let target = run.checkpoint(TARGET);
    assert_eq!(
        cli(&["--config", c, "analyze", "--base", s(&target), "--updated", s(&merged), "--bits", "4"]),
        0
    );
    assert!(run.masking("merged", "csv").exists());
    assert_eq!(
        cli(&["--out", s(&out), "eval", "--checkpoint", s(&target), "--retrain", s(&run.checkpoint(RETRAIN))]),
        0
    );

    // A missing cell shows up as a gap rather than an error.
    let full_ft = manifest.runs.iter().find(|r| r.id.starts_with("GA_GDR_full_ft")).unwrap().id.clone();
    fs::remove_file(run.cell(&full_ft, "int4")).unwrap();
    assert_eq!(cli(&["--out", s(&out), "report"]), 0);
    let report = fs::read_to_string(run.report("csv")).unwrap();
    let row = report
        .lines()
        .find(|l| l.starts_with("GA_GDR,") && l.contains(",none,"))
        .unwrap();
    assert!(row.contains("missing"), "{row}");
}
