//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary so the
//! lines always reach stdout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde_json::Value;

use san_core::accounting::count;
use san_core::attention::{AttentionConfig, Operator, PairwiseRelation, PatchRelation, PositionMode};
use san_core::gradcheck::{self, Options};
use san_core::models::{build, load_checkpoint, ModelSpec};
use san_core::nn::seeded_rng;
use san_core::oracle::{check_operator, sweep_operators};
use san_core::robust::{manipulate, Manipulation};
use san_core::structure;
use san_core::train::{DatasetSource, Split};

const SAN: &str = env!("CARGO_BIN_EXE_san");

/// A criterion result. `blocked` marks a failure caused by missing inputs
/// rather than by the implementation.
struct Verdict {
    passed: bool,
    blocked: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, blocked: false, detail: detail.into() }
    }
}

/// Collects sub-check failures of one criterion.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn within_budget(&mut self, elapsed: Duration, budget: Duration) {
        self.note(format!("{:.2}s of {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()));
        self.expect(elapsed < budget, format!("runtime {:.1}s exceeds {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()));
    }

    fn verdict(self) -> Verdict {
        let passed = self.failures.is_empty();
        let mut parts = self.notes;
        parts.extend(self.failures);
        Verdict::new(passed, parts.join("; "))
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    ((value - target) / target).abs() <= tol
}

fn san10(cfg: AttentionConfig) -> ModelSpec {
    ModelSpec::preset("san10", Some(cfg)).unwrap()
}

fn pairwise() -> AttentionConfig {
    AttentionConfig::pairwise(PairwiseRelation::Subtraction)
}

fn patchwise() -> AttentionConfig {
    AttentionConfig::patchwise(PatchRelation::Concatenation)
}

fn params_m(spec: &ModelSpec) -> f64 {
    count(spec).unwrap().params_m()
}

fn macs_g(spec: &ModelSpec) -> f64 {
    count(spec).unwrap().macs_g()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut c = Checks::default();
    let pin = |c: &mut Checks, label: String, spec: &ModelSpec, target: f64, tol: f64| {
        let p = params_m(spec);
        c.expect(within(p, target, tol), format!("{label}: {p:.2}M vs {target}M"));
    };
    for (name, pair, patch) in [("san10", 10.5, 11.8), ("san15", 14.1, 16.2), ("san19", 17.6, 20.5)] {
        pin(&mut c, format!("{name} pairwise"), &ModelSpec::preset(name, Some(pairwise())).unwrap(), pair, 0.02);
        pin(&mut c, format!("{name} patchwise"), &ModelSpec::preset(name, Some(patchwise())).unwrap(), patch, 0.02);
    }
    for (name, p) in [("resnet26", 13.7), ("resnet38", 19.6), ("resnet50", 25.6)] {
        pin(&mut c, name.into(), &ModelSpec::preset(name, None).unwrap(), p, 0.02);
    }
    let base = count(&san10(pairwise())).unwrap().params;
    for (k, p) in [(3, 10.7), (5, 11.2), (7, 11.8), (9, 12.7), (11, 13.8)] {
        let pair = count(&san10(pairwise()).with_footprint(k).unwrap()).unwrap().params;
        c.expect(pair == base, format!("pairwise k={k}: {pair} != {base}"));
        pin(&mut c, format!("patchwise k={k}"), &san10(patchwise()).with_footprint(k).unwrap(), p, 0.02);
    }
    let single = AttentionConfig { gamma_depth: 1, ..patchwise() };
    pin(&mut c, "patchwise single-linear gamma".into(), &san10(single), 53.5, 0.05);
    pin(&mut c, "pairwise concatenation".into(), &san10(AttentionConfig::pairwise(PairwiseRelation::Concatenation)), 10.6, 0.02);
    pin(&mut c, "pairwise dot".into(), &san10(AttentionConfig::pairwise(PairwiseRelation::Dot)), 10.5, 0.02);
    c.note(format!("san19 pairwise {:.2}M", params_m(&ModelSpec::preset("san19", None).unwrap())));
    c.within_budget(start.elapsed(), Duration::from_secs(1));
    c.verdict()
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut c = Checks::default();
    let pin = |c: &mut Checks, label: String, spec: &ModelSpec, target: f64| {
        let m = macs_g(spec);
        c.expect(within(m, target, 0.10), format!("{label}: {m:.2}G vs {target}G"));
    };
    pin(&mut c, "resnet26".into(), &ModelSpec::preset("resnet26", None).unwrap(), 2.4);
    pin(&mut c, "resnet50".into(), &ModelSpec::preset("resnet50", None).unwrap(), 4.1);
    pin(&mut c, "san10 pairwise".into(), &san10(pairwise()), 2.2);
    pin(&mut c, "san10 patchwise".into(), &san10(patchwise()), 1.9);
    for (k, m) in [(3, 1.7), (5, 1.9), (7, 2.2), (9, 2.5), (11, 3.0)] {
        pin(&mut c, format!("pairwise k={k}"), &san10(pairwise()).with_footprint(k).unwrap(), m);
    }
    for (depth, m) in [(1, 9.5), (2, 1.9), (3, 2.0)] {
        pin(&mut c, format!("patchwise gamma depth {depth}"), &san10(AttentionConfig { gamma_depth: depth, ..patchwise() }), m);
    }
    c.note(format!("san10 pairwise {:.2}G", macs_g(&san10(pairwise()))));
    c.within_budget(start.elapsed(), Duration::from_secs(1));
    c.verdict()
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut c = Checks::default();
    let names = gradcheck::case_names();
    let operators = sweep_operators();
    c.expect(operators.len() == 21, format!("{} operators swept, expected 21", operators.len()));
    for op in &operators {
        c.expect(names.contains(&op.name()), format!("{} not covered", op.name()));
    }
    let mut worst = (0.0f64, String::new());
    for name in &names {
        match gradcheck::run_case(name, Options::default()) {
            Ok(r) => {
                c.expect(r.passed && r.max_rel_error <= 1e-4, format!("{name}: rel error {:.2e} at {}", r.max_rel_error, r.worst));
                if r.max_rel_error >= worst.0 {
                    worst = (r.max_rel_error, name.clone());
                }
            }
            Err(e) => c.expect(false, format!("{name}: {e}")),
        }
    }
    c.note(format!("{} cases, max rel error {:.2e} ({})", names.len(), worst.0, worst.1));
    c.within_budget(start.elapsed(), Duration::from_secs(300));
    c.verdict()
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let mut c = Checks::default();
    let mut worst = 0.0f64;
    for op in sweep_operators() {
        match check_operator(op, 20, 3, 0) {
            Ok(r) => {
                c.expect(r.cases == 20 && r.max_abs_diff <= 1e-10, format!("{}: max abs diff {:.2e}", r.operator, r.max_abs_diff));
                worst = worst.max(r.max_abs_diff);
            }
            Err(e) => c.expect(false, format!("{}: {e}", op.name())),
        }
    }
    c.note(format!("21 operators x 20 cases, max abs diff {worst:.2e}"));
    c.within_budget(start.elapsed(), Duration::from_secs(120));
    c.verdict()
}

fn criterion_5() -> Verdict {
    let mut c = Checks::default();
    let mut rng = seeded_rng(2024, 0);
    let mut worst_perm = 0.0f64;
    for relation in PairwiseRelation::ALL {
        for position in PositionMode::ALL {
            let op = Operator::Pairwise { relation, position };
            for trial in 0..4u64 {
                let mut order: Vec<usize> = (0..9).collect();
                order.shuffle(&mut rng);
                let gap = structure::slot_permutation_gap::<f64>(op, &order, trial).unwrap();
                worst_perm = worst_perm.max(gap);
                c.expect(gap <= 1e-12, format!("(a) {}: permutation gap {gap:.2e}", op.name()));
            }
        }
    }
    let mut worst_conv = 0.0f64;
    for relation in PatchRelation::ALL {
        let gap = structure::patchwise_conv_gap(relation, 11).unwrap();
        worst_conv = worst_conv.max(gap);
        c.expect(gap <= 1e-6, format!("(b) {relation:?}: conv gap {gap:.2e}"));
    }
    let dot = structure::scalar_dot_gap(5).unwrap();
    c.expect(dot <= 1e-12, format!("(c) scalar vs dot gap {dot:.2e}"));
    let identity = (0..3).all(|seed| structure::residual_identity(seed).unwrap());
    c.expect(identity, "(d) zero-expansion block is not the identity");
    c.note(format!("(a) {worst_perm:.1e} (b) {worst_conv:.1e} (c) {dot:.1e} (d) bit-exact {identity}"));
    c.verdict()
}

fn san(args: &[&str]) -> std::process::Output {
    Command::new(SAN).args(args).output().expect("failed to launch the san binary")
}

fn san_ok(args: &[&str]) -> Result<(), String> {
    let out = san(args);
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`san {}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_default()).unwrap_or(Value::Null)
}

fn cifar_root() -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("SAN_DATA_ROOT")?);
    san_core::train::read_cifar(&root).ok().map(|_| root)
}

fn criterion_6(work: &Path, blobs_run: &Path) -> Verdict {
    let mut c = Checks::default();
    let mut blocked = false;

    match cifar_root() {
        Some(root) => {
            let dir = work.join("cifar");
            let start = Instant::now();
            let root = root.to_string_lossy().into_owned();
            let run = san_ok(&["train", "--model", "san-tiny", "--data", "cifar10", "--data-root", &root, "--epochs", "20", "--out", dir.to_str().unwrap()]);
            let elapsed = start.elapsed();
            match run {
                Ok(()) => {
                    let top1 = read_json(&dir.join("summary.json"))["final"]["top1"].as_f64().unwrap_or(0.0);
                    c.note(format!("cifar top1 {:.1}% in {:.0}s", 100.0 * top1, elapsed.as_secs_f64()));
                    c.expect(top1 > 0.40, format!("cifar top1 {:.1}% not above 40%", 100.0 * top1));
                    c.expect(elapsed < Duration::from_secs(1800), "cifar run exceeds 30 min");
                }
                Err(e) => c.expect(false, e),
            }
        }
        None => {
            blocked = true;
            c.expect(false, "cifar: CIFAR-10 binary batches not found (set SAN_DATA_ROOT); 5,000-image run not performed");
        }
    }

    let start = Instant::now();
    let run = san_ok(&["train", "--model", "san-tiny", "--data", "blobs", "--val-per-class", "50", "--out", blobs_run.to_str().unwrap()]);
    let elapsed = start.elapsed();
    match run {
        Ok(()) => {
            let top1 = read_json(&blobs_run.join("summary.json"))["final"]["top1"].as_f64().unwrap_or(0.0);
            c.note(format!("blobs top1 {:.1}% in {:.0}s", 100.0 * top1, elapsed.as_secs_f64()));
            c.expect(top1 > 0.90, format!("blobs top1 {:.1}% not above 90%", 100.0 * top1));
            c.expect(elapsed < Duration::from_secs(120), format!("blobs run took {:.0}s", elapsed.as_secs_f64()));
        }
        Err(e) => c.expect(false, e),
    }

    let dir = work.join("zero-lr");
    let run = san_ok(&[
        "train", "--data", "blobs", "--train-per-class", "4", "--val-per-class", "1", "--epochs", "2", "--lr", "0",
        "--augment", "true", "--seed", "3", "--out", dir.to_str().unwrap(),
    ]);
    match run {
        Ok(()) => {
            let spec = ModelSpec::preset("san-tiny", None).unwrap();
            let fresh = build::<f32>(&spec, 3).unwrap();
            let trained = load_checkpoint::<f32>(&dir.join("last.ckpt")).unwrap();
            let bits = |m: &san_core::models::Model<f32>| -> Vec<Vec<u32>> {
                m.params().iter().filter(|p| p.trainable()).map(|p| p.value().data().iter().map(|v| v.to_bits()).collect()).collect()
            };
            let same = bits(&fresh) == bits(&trained);
            c.expect(same, "zero-lr run changed trainable parameters");
            c.note(format!("zero-lr bit-identical {same}"));
        }
        Err(e) => c.expect(false, e),
    }
    let only_missing_data = blocked && c.failures.len() == 1;
    let mut v = c.verdict();
    v.blocked = only_missing_data;
    v
}

fn criterion_7(work: &Path, blobs_run: &Path) -> Verdict {
    let mut c = Checks::default();

    match Split::load(&DatasetSource::blobs(), 0) {
        Ok(split) => {
            let (size, len) = (split.val.size, split.val.image_len());
            let mut exact = true;
            for i in 0..split.val.len() {
                let img = split.val.image(i);
                let mut x = img.to_vec();
                for _ in 0..4 {
                    x = manipulate(&x, size, size, Manipulation::Cw90).unwrap();
                }
                exact &= x.iter().zip(img).all(|(a, b)| a.to_bits() == b.to_bits());
                for m in Manipulation::ALL {
                    let out = manipulate(img, size, size, m).unwrap();
                    let (mut a, mut b) = (img.to_vec(), out);
                    a.sort_by(f32::total_cmp);
                    b.sort_by(f32::total_cmp);
                    exact &= a.len() == len && a == b;
                }
            }
            c.expect(exact, "manipulations are not exact permutations");
            c.note(format!("cw90^4 identity over {} images", split.val.len()));
        }
        Err(e) => c.expect(false, e.to_string()),
    }

    if !blobs_run.join("best.ckpt").exists() {
        c.expect(false, "no trained SAN-tiny run to attack");
        return c.verdict();
    }
    let run = blobs_run.to_str().unwrap();
    let mut reports = BTreeMap::new();
    for (iters, step) in [("2", "4"), ("4", "2")] {
        let dir = work.join(format!("attack-n{iters}"));
        match san_ok(&["attack", "--run", run, "--eps", "8", "--step", step, "--iters", iters, "--images", "500", "--seed", "0", "--out", dir.to_str().unwrap()]) {
            Ok(()) => {
                reports.insert(iters, read_json(&dir.join("attack.json")));
            }
            Err(e) => c.expect(false, e),
        }
    }
    if let (Some(n2), Some(n4)) = (reports.get("2"), reports.get("4")) {
        let f = |v: &Value, k: &str| v[k].as_f64().unwrap_or(f64::NAN);
        for (n, r) in [(2, n2), (4, n4)] {
            let linf: Vec<f64> = r["linf_per_step"].as_array().map(|a| a.iter().filter_map(Value::as_f64).collect()).unwrap_or_default();
            c.expect(linf.len() == n && linf.iter().all(|&d| d <= 8.0), format!("n={n}: L-inf per step {linf:?}"));
            c.expect(f(r, "images") == 500.0, format!("n={n}: {} images", r["images"]));
            c.expect(f(r, "attack_top1") < f(r, "clean_top1"), format!("n={n}: attacked top1 {} not below clean {}", r["attack_top1"], r["clean_top1"]));
        }
        let (s2, s4) = (f(n2, "success_rate"), f(n4, "success_rate"));
        c.expect(s4 >= s2, format!("success n=4 {s4} below n=2 {s2}"));
        c.note(format!(
            "clean {:.1}%, n=2 success {:.1}% top1 {:.1}%, n=4 success {:.1}% top1 {:.1}%",
            100.0 * f(n2, "clean_top1"),
            100.0 * s2,
            100.0 * f(n2, "attack_top1"),
            100.0 * s4,
            100.0 * f(n4, "attack_top1")
        ));
    }
    c.verdict()
}

/// Every file under `dir`, with timestamps removed from JSON documents.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).into_iter().flatten().flatten() {
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        let bytes = fs::read(&path).unwrap_or_default();
        let bytes = if name.ends_with(".json") {
            let mut v: Value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
            if let Some(obj) = v.as_object_mut() {
                obj.remove("started_at");
                obj.remove("elapsed_seconds");
            }
            serde_json::to_vec(&v).unwrap()
        } else {
            bytes
        };
        files.insert(name, bytes);
    }
    files
}

fn criterion_8(work: &Path) -> Verdict {
    let mut c = Checks::default();
    let dir = |name: &str| work.join("repeat").join(name).to_string_lossy().into_owned();
    let (train_dir, count_dir, grad_dir, oracle_dir) = (dir("train"), dir("count"), dir("gradcheck"), dir("oracle"));
    let (eval_dir, robust_dir, attack_dir) = (dir("eval"), dir("robust"), dir("attack"));
    let commands: Vec<Vec<&str>> = vec![
        vec!["count", "--model", "san19", "--attention", "patchwise", "--relation", "star_product", "--out", &count_dir],
        vec!["gradcheck", "--kind", "pairwise", "--relation", "subtraction", "--seed", "4", "--out", &grad_dir],
        vec!["oracle", "--kind", "scalar", "--cases-per-operator", "5", "--seed", "9", "--out", &oracle_dir],
        vec!["train", "--data", "blobs", "--train-per-class", "8", "--val-per-class", "4", "--epochs", "2", "--augment", "true", "--seed", "5", "--out", &train_dir],
        vec!["eval", "--run", &train_dir, "--out", &eval_dir],
        vec!["robust", "--run", &train_dir, "--images", "30", "--seed", "2", "--out", &robust_dir],
        vec!["attack", "--run", &train_dir, "--iters", "3", "--step", "2", "--images", "30", "--seed", "2", "--out", &attack_dir],
    ];
    let mut files = 0;
    for args in &commands {
        let out = PathBuf::from(args.last().unwrap());
        let first = san_ok(args).map(|_| snapshot(&out));
        let second = san_ok(args).map(|_| snapshot(&out));
        match (first, second) {
            (Ok(a), Ok(b)) => {
                c.expect(a.contains_key("manifest.json"), format!("{}: no manifest", args[0]));
                let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
                c.expect(differing.is_empty() && a.len() == b.len(), format!("{}: outputs differ in {differing:?}", args[0]));
                files += a.len();
            }
            (Err(e), _) | (_, Err(e)) => c.expect(false, e),
        }
    }
    c.note(format!("{} commands, {files} files compared", commands.len()));
    c.verdict()
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let work = tempfile::tempdir().expect("temporary directory");
    let blobs_run = work.path().join("blobs");
    let verdicts = [
        (1, "parameter counts", criterion_1()),
        (2, "MAC counts", criterion_2()),
        (3, "gradient suite", criterion_3()),
        (4, "oracle suite", criterion_4()),
        (5, "structural properties", criterion_5()),
        (6, "training sanity", criterion_6(work.path(), &blobs_run)),
        (7, "robustness harness", criterion_7(work.path(), &blobs_run)),
        (8, "determinism", criterion_8(work.path())),
    ];
    let mut unexpected = 0;
    for (id, name, v) in &verdicts {
        println!("{} {id} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        if !v.passed && !v.blocked {
            unexpected += 1;
        }
    }
    let blocked = verdicts.iter().filter(|(_, _, v)| !v.passed && v.blocked).count();
    println!(
        "acceptance: {} passed, {} failed ({blocked} for missing data)",
        verdicts.iter().filter(|(_, _, v)| v.passed).count(),
        verdicts.len() - verdicts.iter().filter(|(_, _, v)| v.passed).count()
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
