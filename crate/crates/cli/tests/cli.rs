use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icxlt_core::transfer::{AdaptationMode, ExperimentSpec, Regime};
use serde_json::Value;

fn icxlt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icxlt"))
        .args(args)
        .current_dir(dir)
        .env_remove("ICXLT_BACKEND_URL")
        .env_remove("ICXLT_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// A small synthetic family in `dir/fam`.
fn family(dir: &Path) -> PathBuf {
    ok(icxlt(
        dir,
        &["synth", "--out", "fam", "--train-size", "40", "--test-size", "12", "--dev-size", "6"],
    ));
    dir.join("fam/manifest.json")
}

const TINY: &[&str] = &["--epochs", "4", "--d-model", "8", "--d-ff", "8", "--alias-bank", "20"];

#[test]
fn validate_accepts_a_generated_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    family(tmp.path());
    let out = ok(icxlt(tmp.path(), &["--json", "validate", "--manifest", "fam/manifest.json"]));
    let v = stdout_json(&out);
    assert_eq!(v["ok"], true);
    assert_eq!(v["dataset"]["source_lang"], "src");
    assert_eq!(v["dataset"]["splits"].as_object().unwrap().len(), 4);
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&icxlt(tmp.path(), &["frobnicate"])), 1);
    assert_eq!(code(&icxlt(tmp.path(), &["validate"])), 1);
    assert_eq!(code(&icxlt(tmp.path(), &["train", "--regime", "ict"])), 1);
    // parses, but there is nothing to evaluate
    assert_eq!(code(&icxlt(tmp.path(), &["eval", "--mode", "zero"])), 1);
    assert_eq!(code(&icxlt(tmp.path(), &["--help"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = icxlt(tmp.path(), &["--json", "validate", "--manifest", "missing.json"]);
    assert_eq!(code(&out), 2);
    let v = stdout_json(&out);
    assert_eq!(v["ok"], false);
    assert_eq!(v["exit_code"], 2);

    std::fs::write(tmp.path().join("broken.json"), "{\"name\": 3}").unwrap();
    assert_eq!(code(&icxlt(tmp.path(), &["validate", "--manifest", "broken.json"])), 2);
}

#[test]
fn unreachable_backend_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    family(tmp.path());
    std::fs::write(
        tmp.path().join("backend.json"),
        r#"{"base_url": "http://127.0.0.1:9", "timeout_ms": 500, "max_retries": 0, "backoff_ms": 1, "workers": 2}"#,
    )
    .unwrap();
    let out = icxlt(
        tmp.path(),
        &[
            "eval",
            "--manifest",
            "fam/manifest.json",
            "--mode",
            "zero",
            "--langs",
            "tga",
            "--backend-config",
            "backend.json",
            "--out",
            "remote.json",
        ],
    );
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_expands_the_seed_grid() {
    let tmp = tempfile::tempdir().unwrap();
    family(tmp.path());
    let mut spec = ExperimentSpec::new("cli-grid", "fam/manifest.json", Regime::Pft, AdaptationMode::Zero);
    spec.train.epochs = 2;
    spec.train.d_model = 8;
    spec.train.d_ff = 8;
    spec.train.alias_bank = 20;
    spec.output = "grid.json".into();
    std::fs::write(tmp.path().join("spec.json"), serde_json::to_string_pretty(&spec).unwrap()).unwrap();

    let out = ok(icxlt(tmp.path(), &["validate", "--spec", "spec.json"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("1 planned runs"));

    // flags override the single seed lists in spec.json
    let out = ok(icxlt(
        tmp.path(),
        &["--json", "run", "--spec", "spec.json", "--finetune-seeds", "0,1", "--shot-src-seeds", "3,4"],
    ));
    let v = stdout_json(&out);
    assert_eq!(v["runs"], 4);
    let results: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("grid.json")).unwrap()).unwrap();
    let mut seeds: Vec<(u64, u64)> = results["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["seeds"]["finetune"].as_u64().unwrap(), r["seeds"]["shot_src"].as_u64().unwrap()))
        .collect();
    seeds.sort();
    assert_eq!(seeds, vec![(0, 3), (0, 4), (1, 3), (1, 4)]);
    let resolved: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("grid.config.json")).unwrap()).unwrap();
    assert_eq!(resolved["spec"]["seeds"]["finetune"], serde_json::json!([0, 1]));
    assert_eq!(resolved["rng_keys"].as_array().unwrap().len(), 4);
}

#[test]
fn synth_train_adapt_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    family(dir);
    assert!(dir.join("fam/overlap.csv").exists());

    let mut train = vec!["train", "--manifest", "fam/manifest.json", "--regime", "ict", "--m", "3", "--out", "model"];
    train.extend_from_slice(TINY);
    ok(icxlt(dir, &train));
    for f in ["model.bin", "vocab.json", "config.json"] {
        assert!(dir.join("model").join(f).exists(), "{f} missing");
    }

    let out = ok(icxlt(
        dir,
        &["--json", "adapt", "--model", "model", "--lang", "tga", "--epochs", "2", "--out", "adapted"],
    ));
    let base: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("model/config.json")).unwrap()).unwrap();
    assert_ne!(stdout_json(&out)["model_sha256"], base["summary"]["model_sha256"]);

    for (mode, out) in [("ic", "ic.json"), ("ic-src", "ic_src.json"), ("zero", "zero.json")] {
        let v = stdout_json(&ok(icxlt(
            dir,
            &["--json", "eval", "--model", "model", "--mode", mode, "--shot-seeds", "0,1", "--out", out],
        )));
        assert_eq!(v["ok"], true);
        assert!(dir.join(out).exists());
    }
    ok(icxlt(dir, &["eval", "--model", "adapted", "--mode", "zero", "--langs", "tga", "--out", "adapted.json"]));

    // the same model and seeds give the same scores
    ok(icxlt(dir, &["eval", "--model", "model", "--mode", "ic", "--shot-seeds", "0,1", "--out", "again.json"]));
    let scores = |f: &str| {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(f)).unwrap()).unwrap();
        v["runs"].as_array().unwrap().iter().map(|r| r["scores"].clone()).collect::<Vec<_>>()
    };
    assert_eq!(scores("ic.json"), scores("again.json"));

    let out = ok(icxlt(
        dir,
        &[
            "--json",
            "report",
            "--results",
            "ic.json",
            "ic_src.json",
            "zero.json",
            "--covariate",
            "overlap=fam/overlap.csv",
            "--permutations",
            "50",
            "--out",
            "report",
        ],
    ));
    let v = stdout_json(&out);
    assert_eq!(v["report"]["tables"].as_array().unwrap().len(), 3);
    for f in ["report.json", "tables/scores.csv", "tables/transfer_gap.csv", "tables/improvement.csv"] {
        assert!(dir.join("report").join(f).exists(), "{f} missing");
    }
}
