use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn san(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_san")).args(args).env_remove("SAN_DATA_ROOT").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn count_params(dir: &Path, extra: &[&str]) -> u64 {
    let out_dir = dir.to_str().unwrap();
    let mut args = vec!["count", "--out", out_dir];
    args.extend_from_slice(extra);
    let out = san(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    json(&dir.join("count.json"))["params"].as_u64().unwrap()
}

#[test]
fn count_reports_san19_pairwise() {
    let dir = tempfile::tempdir().unwrap();
    let p = count_params(dir.path(), &["--model", "san19", "--attention", "pairwise", "--relation", "subtraction"]);
    assert!((p as f64 / 17.6e6 - 1.0).abs() <= 0.02, "{p}");
    assert!(dir.path().join("count.txt").exists());
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "count");
    assert_eq!(manifest["resolved"]["model"]["name"], "san19");
    assert!(manifest["version"].is_string());
}

#[test]
fn pairwise_params_do_not_depend_on_footprint() {
    let dir = tempfile::tempdir().unwrap();
    let a = count_params(&dir.path().join("k3"), &["--model", "san10", "--attention", "pairwise", "--footprint", "3"]);
    let b = count_params(&dir.path().join("k11"), &["--model", "san10", "--attention", "pairwise", "--footprint", "11"]);
    assert_eq!(a, b);
}

#[test]
fn resolved_spec_file_reproduces_the_count() {
    let dir = tempfile::tempdir().unwrap();
    let a = count_params(&dir.path().join("a"), &["--model", "san15", "--attention", "patchwise", "--relation", "clique_product", "--gamma-depth", "3"]);
    let spec = json(&dir.path().join("a/manifest.json"))["resolved"]["model"].clone();
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let b = count_params(&dir.path().join("b"), &["--spec", spec_path.to_str().unwrap()]);
    assert_eq!(a, b);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&san(&["count", "--model", "nope", "--out", out])), 2);
    assert_eq!(code(&san(&["count", "--model", "resnet50", "--relation", "dot", "--out", out])), 2);
    assert_eq!(code(&san(&["count", "--model", "san10", "--position", "relative", "--attention", "patchwise", "--out", out])), 2);
    assert_eq!(code(&san(&["count", "--model", "san10", "--r1", "7", "--out", out])), 2);
    assert_eq!(code(&san(&["count", "--bogus-flag"])), 2);
    assert_eq!(code(&san(&["gradcheck", "--case", "no/such/case", "--out", out])), 2);
    assert_eq!(code(&san(&["train", "--data", "cifar10", "--out", out])), 2);
    assert_eq!(code(&san(&["train", "--data", "cifar10", "--data-root", "/nonexistent", "--out", out])), 2);
    assert_eq!(code(&san(&["eval", "--run", "/nonexistent", "--out", out])), 2);
}

#[test]
fn gradcheck_filter_selects_one_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = san(&["gradcheck", "--kind", "patchwise", "--relation", "clique_product", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let report = json(&dir.path().join("gradcheck.json"));
    let cases = report["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 1);
    assert_eq!(cases[0]["case"], "patchwise/clique_product");
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn injected_wrong_sign_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let out = san(&["gradcheck", "--case", "pairwise/subtraction/relative", "--inject-wrong-sign", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("pairwise/subtraction/relative") && stderr.contains("[1, 16, 5, 5]"), "{stderr}");
    let report = json(&dir.path().join("gradcheck.json"));
    assert_eq!(report["passed"], false);
    assert_eq!(report["failed"][0], "pairwise/subtraction/relative");
}

#[test]
fn oracle_runs_requested_operators() {
    let dir = tempfile::tempdir().unwrap();
    let out = san(&["oracle", "--kind", "patchwise", "--cases-per-operator", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let report = json(&dir.path().join("oracle.json"));
    assert_eq!(report["operators"].as_array().unwrap().len(), 3);
    assert!(report["max_abs_diff"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn train_then_probe_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = san(&["train", "--data", "blobs", "--train-per-class", "6", "--val-per-class", "3", "--epochs", "3", "--out", run_s]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let robust = dir.path().join("robust");
    assert_eq!(code(&san(&["robust", "--run", run_s, "--manipulation", "cw180", "--out", robust.to_str().unwrap()])), 0);
    let report = json(&robust.join("robust.json"));
    let rows = report["manipulations"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["manipulation"], "cw180");
    assert_eq!(code(&san(&["robust", "--run", run_s, "--manipulation", "cw45", "--out", robust.to_str().unwrap()])), 2);

    for (iters, step) in [("2", "4"), ("4", "2")] {
        let attack = dir.path().join(format!("attack{iters}"));
        let out = san(&["attack", "--run", run_s, "--iters", iters, "--eps", "8", "--step", step, "--out", attack.to_str().unwrap()]);
        assert_eq!(code(&out), 0);
        let report = json(&attack.join("attack.json"));
        let rate = report["success_rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&rate));
        let linf = report["linf_per_step"].as_array().unwrap();
        assert_eq!(linf.len(), iters.parse::<usize>().unwrap());
        assert!(linf.iter().all(|d| d.as_f64().unwrap() <= 8.0));
    }

    let eval = dir.path().join("eval");
    assert_eq!(code(&san(&["eval", "--run", run_s, "--out", eval.to_str().unwrap()])), 0);
    let acc = json(&eval.join("eval.json"));
    let summary = json(&run.join("summary.json"));
    assert_eq!(acc["top1"], summary["best_top1"]);
    assert_eq!(acc["images"], 30);
}
