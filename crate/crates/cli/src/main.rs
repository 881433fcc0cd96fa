use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use san_core::accounting;
use san_core::gradcheck::{self, Options};
use san_core::models::{load_checkpoint, Model};
use san_core::oracle;
use san_core::robust::{pgd_attack, robustness_report, sample_images, AttackConfig, Manipulation};
use san_core::train::{evaluate, train, DatasetSource, RunConfig, Split, TrainConfig};

mod model_args;

use model_args::ModelArgs;

/// Bad flags, missing inputs or an unusable configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "san", version, about = "Self-attention networks: cost accounting, verification, training and robustness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and multiply-accumulate counts of a model.
    Count(CountArgs),
    /// Central finite-difference checks of every operator.
    Gradcheck(GradcheckArgs),
    /// Vectorized operators against naive per-pixel loops.
    Oracle(OracleArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Accuracy of a trained run on its validation split.
    Eval(EvalArgs),
    /// Accuracy under rotations and flips.
    Robust(RobustArgs),
    /// Targeted PGD attack on a trained run.
    Attack(AttackArgs),
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Also build the model and compare allocated parameters per layer.
    #[arg(long)]
    check_runtime: bool,
    #[arg(long, default_value = "runs/count")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CaseKind {
    Op,
    Pairwise,
    Patchwise,
    Scalar,
    Conv,
    Block,
}

impl CaseKind {
    fn prefix(self) -> &'static str {
        match self {
            CaseKind::Op => "op",
            CaseKind::Pairwise => "pairwise",
            CaseKind::Patchwise => "patchwise",
            CaseKind::Scalar => "scalar",
            CaseKind::Conv => "conv",
            CaseKind::Block => "block",
        }
    }
}

#[derive(Args)]
struct Filter {
    #[arg(long, value_enum)]
    kind: Option<CaseKind>,
    /// Relation (second name segment), e.g. clique_product.
    #[arg(long)]
    relation: Option<String>,
    /// Position mode (third name segment) for pairwise cases.
    #[arg(long)]
    position: Option<String>,
    /// Exact case name; repeatable.
    #[arg(long = "case")]
    cases: Vec<String>,
}

impl Filter {
    fn keep(&self, name: &str) -> bool {
        let parts: Vec<&str> = name.split('/').collect();
        let seg = |i: usize, want: &Option<String>| match want {
            Some(w) => parts.get(i).is_some_and(|p| *p == w.replace('-', "_")),
            None => true,
        };
        (self.cases.is_empty() || self.cases.iter().any(|c| c == name))
            && self.kind.is_none_or(|k| parts[0] == k.prefix())
            && seg(1, &self.relation)
            && seg(2, &self.position)
    }

    fn select(&self, names: Vec<String>) -> Result<Vec<String>> {
        let picked: Vec<String> = names.into_iter().filter(|n| self.keep(n)).collect();
        if picked.is_empty() {
            return Err(UsageError("no case matches the filter".into()).into());
        }
        Ok(picked)
    }
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    filter: Filter,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the case names and exit.
    #[arg(long)]
    list: bool,
    /// Negate analytic gradients to confirm failures are detected.
    #[arg(long, hide = true)]
    inject_wrong_sign: bool,
    #[arg(long, default_value = "runs/gradcheck")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    filter: Filter,
    /// Random cases per operator.
    #[arg(long, default_value_t = 20)]
    cases_per_operator: usize,
    #[arg(long, default_value_t = 3)]
    footprint: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/oracle")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Cifar10,
    Blobs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum)]
    data: DataKind,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, env = "SAN_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// CIFAR-10 training subset size (class balanced).
    #[arg(long, default_value_t = 5000)]
    train_images: usize,
    /// Blobs training images per class.
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long)]
    val_per_class: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to load instead of the run's best.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the CIFAR-10 location recorded in the run.
    #[arg(long, env = "SAN_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
}

#[derive(Args)]
struct RobustArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Manipulation to evaluate; repeatable. All of them by default.
    #[arg(long = "manipulation")]
    manipulations: Vec<String>,
    /// Size of the seeded validation sample.
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/robust")]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    run: RunArgs,
    /// L-infinity radius on the 0-255 pixel scale.
    #[arg(long, default_value_t = 8.0)]
    eps: f32,
    #[arg(long, default_value_t = 4.0)]
    step: f32,
    #[arg(long, default_value_t = 2)]
    iters: usize,
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/attack")]
    out: PathBuf,
}

/// What a finished command leaves behind.
struct Outcome {
    out: PathBuf,
    resolved: Value,
    passed: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn cmd_count(a: CountArgs) -> Result<Outcome> {
    let spec = a.model.resolve("san10")?;
    prepare(&a.out)?;
    let report = accounting::count(&spec)?;
    println!("{report}");
    let mut passed = true;
    let mut doc = json!({
        "model": spec.name,
        "input_hw": spec.input_hw,
        "params": report.params,
        "macs": report.macs,
        "params_m": report.params_m(),
        "macs_g": report.macs_g(),
        "breakdown": report.breakdown,
    });
    if a.check_runtime {
        let check = accounting::verify_against_runtime(&spec)?;
        passed = check.matches();
        for m in &check.mismatches {
            eprintln!("mismatch {}: symbolic {} runtime {}", m.layer, m.symbolic, m.runtime);
        }
        println!("runtime check: {}", if passed { "match" } else { "MISMATCH" });
        doc["runtime_check"] = serde_json::to_value(&check)?;
    }
    write_json(&a.out.join("count.json"), &doc)?;
    fs::write(a.out.join("count.txt"), format!("{report}\n"))?;
    Ok(Outcome { out: a.out, resolved: json!({ "model": spec, "check_runtime": a.check_runtime }), passed })
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    let names = a.filter.select(gradcheck::case_names())?;
    if a.list {
        names.iter().for_each(|n| println!("{n}"));
        return Ok(Outcome { out: a.out, resolved: json!({ "cases": names }), passed: true });
    }
    prepare(&a.out)?;
    let opts = Options { seed: a.seed, wrong_sign: a.inject_wrong_sign, ..Options::default() };
    let mut reports = Vec::new();
    for name in &names {
        let r = gradcheck::run_case(name, opts)?;
        println!(
            "{:<4} {:<40} shape {:?} max rel {:.2e}",
            if r.passed { "ok" } else { "FAIL" },
            r.case,
            r.shape,
            r.max_rel_error
        );
        if !r.passed {
            eprintln!(
                "gradient mismatch in {} (shape {:?}): max rel error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
                r.case, r.shape, r.max_rel_error, r.worst, r.analytic, r.numeric
            );
        }
        reports.push(r);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.case.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("{} cases, {} failed, max rel error {worst:.2e} (tolerance {:.0e})", reports.len(), failed.len(), opts.tolerance);
    let passed = failed.is_empty();
    write_json(
        &a.out.join("gradcheck.json"),
        &json!({
            "step": opts.step,
            "tolerance": opts.tolerance,
            "max_rel_error": worst,
            "failed": failed,
            "passed": passed,
            "cases": reports,
        }),
    )?;
    let resolved = json!({
        "cases": names,
        "seed": a.seed,
        "step": opts.step,
        "tolerance": opts.tolerance,
        "inject_wrong_sign": a.inject_wrong_sign,
    });
    Ok(Outcome { out: a.out, resolved, passed })
}

fn cmd_oracle(a: OracleArgs) -> Result<Outcome> {
    let operators: Vec<_> = oracle::sweep_operators().into_iter().filter(|o| a.filter.keep(&o.name())).collect();
    if operators.is_empty() {
        return Err(UsageError("no operator matches the filter".into()).into());
    }
    prepare(&a.out)?;
    let mut reports = Vec::new();
    for op in &operators {
        let r = oracle::check_operator(*op, a.cases_per_operator, a.footprint, a.seed)?;
        println!("{:<4} {:<40} {} cases max abs {:.2e}", if r.passed { "ok" } else { "FAIL" }, r.operator, r.cases, r.max_abs_diff);
        if !r.passed {
            eprintln!("oracle mismatch in {} (shape {:?}): max abs diff {:.3e}", r.operator, r.shape, r.max_abs_diff);
        }
        reports.push(r);
    }
    let passed = reports.iter().all(|r| r.passed);
    let worst = reports.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    write_json(&a.out.join("oracle.json"), &json!({ "max_abs_diff": worst, "passed": passed, "operators": reports }))?;
    let resolved = json!({
        "operators": operators.iter().map(|o| o.name()).collect::<Vec<_>>(),
        "cases_per_operator": a.cases_per_operator,
        "footprint": a.footprint,
        "seed": a.seed,
    });
    Ok(Outcome { out: a.out, resolved, passed })
}

fn cmd_train(a: TrainArgs) -> Result<Outcome> {
    let spec = a.model.resolve("san-tiny")?;
    let (dataset, mut cfg) = match a.data {
        DataKind::Cifar10 => {
            let path = a
                .data_root
                .clone()
                .ok_or_else(|| UsageError("CIFAR-10 needs --data-root or SAN_DATA_ROOT".into()))?;
            let dataset = DatasetSource::Cifar10Binary {
                path,
                train_images: a.train_images,
                val_per_class: a.val_per_class.unwrap_or(100),
            };
            (dataset, TrainConfig::default())
        }
        DataKind::Blobs => {
            let mut dataset = DatasetSource::blobs();
            if let DatasetSource::SyntheticGaussianBlobs { train_per_class, val_per_class, size, .. } = &mut dataset {
                *train_per_class = a.train_per_class;
                *val_per_class = a.val_per_class.unwrap_or(*val_per_class);
                *size = spec.input_hw;
            }
            (dataset, TrainConfig::blobs())
        }
    };
    cfg.seed = a.seed;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.base_lr = a.lr.unwrap_or(cfg.base_lr);
    cfg.momentum = a.momentum.unwrap_or(cfg.momentum);
    cfg.weight_decay = a.weight_decay.unwrap_or(cfg.weight_decay);
    cfg.label_smoothing = a.label_smoothing.unwrap_or(cfg.label_smoothing);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.augment = a.augment.unwrap_or(cfg.augment);
    cfg.validate()?;

    let split = Split::load(&dataset, cfg.seed)?;
    prepare(&a.out)?;
    let mut model = san_core::models::build::<f32>(&spec, cfg.seed)?;
    println!("{}: {} train / {} val images, {} epochs", spec.name, split.train.len(), split.val.len(), cfg.epochs);
    let report = train(&mut model, &split, &dataset, &cfg, Some(&a.out), |m| {
        println!(
            "epoch {:>3}  lr {:.4}  loss {:.4}  top1 {:.1}%  top5 {:.1}%",
            m.epoch,
            m.lr,
            m.train_loss,
            100.0 * m.val_top1,
            100.0 * m.val_top5
        );
    })?;
    println!(
        "best top1 {:.1}% at epoch {}, final top1 {:.1}% top5 {:.1}% ({:.0}s)",
        100.0 * report.best_top1,
        report.best_epoch,
        100.0 * report.final_accuracy.top1,
        100.0 * report.final_accuracy.top5,
        report.seconds
    );
    let resolved = json!({ "model": spec, "dataset": dataset, "train": cfg });
    Ok(Outcome { out: a.out, resolved, passed: true })
}

/// A trained model with the validation split it was measured on.
struct LoadedRun {
    config: RunConfig,
    checkpoint: PathBuf,
    model: Model<f32>,
    split: Split,
}

fn load_run(a: &RunArgs) -> Result<LoadedRun> {
    let path = a.run.join("config.json");
    let text = fs::read_to_string(&path).map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
    let mut config: RunConfig =
        serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid run config {}: {e}", path.display())))?;
    if let (DatasetSource::Cifar10Binary { path, .. }, Some(root)) = (&mut config.dataset, &a.data_root) {
        *path = root.clone();
    }
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| a.run.join("best.ckpt"));
    let model = load_checkpoint::<f32>(&checkpoint)?;
    let split = Split::load(&config.dataset, config.train.seed)?;
    if split.norm != config.normalizer {
        eprintln!("warning: reloaded normalizer differs from the one recorded in the run; using the recorded one");
    }
    let split = Split { norm: config.normalizer.clone(), ..split };
    Ok(LoadedRun { config, checkpoint, model, split })
}

fn run_resolved(run: &LoadedRun, a: &RunArgs) -> Value {
    json!({
        "run": a.run,
        "checkpoint": run.checkpoint,
        "batch_size": a.batch_size,
        "dataset": run.config.dataset,
        "model": run.config.model,
    })
}

fn cmd_eval(a: EvalArgs) -> Result<Outcome> {
    let run = load_run(&a.run)?;
    prepare(&a.out)?;
    let acc = evaluate(&run.model, &run.split.val, &run.split.norm, a.run.batch_size)?;
    println!("{}: top1 {:.1}% top5 {:.1}% on {} images", run.config.model.name, 100.0 * acc.top1, 100.0 * acc.top5, run.split.val.len());
    write_json(
        &a.out.join("eval.json"),
        &json!({ "model": run.config.model.name, "images": run.split.val.len(), "top1": acc.top1, "top5": acc.top5 }),
    )?;
    Ok(Outcome { out: a.out, resolved: run_resolved(&run, &a.run), passed: true })
}

fn cmd_robust(a: RobustArgs) -> Result<Outcome> {
    let manipulations = if a.manipulations.is_empty() {
        Manipulation::ALL.to_vec()
    } else {
        a.manipulations
            .iter()
            .map(|s| Manipulation::parse(&s.replace('-', "_")).map_err(|e| UsageError(e.to_string()).into()))
            .collect::<Result<Vec<_>>>()?
    };
    let run = load_run(&a.run)?;
    prepare(&a.out)?;
    let set = sample_images(&run.split.val, a.images, a.seed);
    let report = robustness_report(&run.model, &set, &run.split.norm, &manipulations, &[], a.seed, a.run.batch_size)?;
    println!("clean top1 {:.1}% top5 {:.1}% on {} images", 100.0 * report.clean.top1, 100.0 * report.clean.top5, report.images);
    for r in &report.manipulations {
        let (d1, d5) = (100.0 * (0.0 - r.drop_top1), 100.0 * (0.0 - r.drop_top5));
        println!("{:<18} top1 {:.1}% ({d1:+.1})  top5 {:.1}% ({d5:+.1})", r.manipulation.label(), 100.0 * r.top1, 100.0 * r.top5);
    }
    write_json(&a.out.join("robust.json"), &report)?;
    fs::write(a.out.join("robust.csv"), report.to_csv())?;
    let mut resolved = run_resolved(&run, &a.run);
    resolved["manipulations"] = serde_json::to_value(&manipulations)?;
    resolved["images"] = json!(a.images);
    resolved["seed"] = json!(a.seed);
    Ok(Outcome { out: a.out, resolved, passed: true })
}

fn cmd_attack(a: AttackArgs) -> Result<Outcome> {
    let attack = AttackConfig { eps: a.eps, step: a.step, iters: a.iters };
    attack.validate().map_err(|e| UsageError(e.to_string()))?;
    let run = load_run(&a.run)?;
    prepare(&a.out)?;
    let set = sample_images(&run.split.val, a.images, a.seed);
    let (model, norm, bs) = (&run.model, &run.split.norm, a.run.batch_size);
    let clean = evaluate(model, &set, norm, bs)?;
    let outcome = pgd_attack(model, &set, norm, &attack, a.seed, bs)?;
    let attacked = evaluate(model, &outcome.adversarial, norm, bs)?;
    println!(
        "eps {} step {} n {}: success {:.1}%, top1 {:.1}% -> {:.1}% on {} images",
        a.eps,
        a.step,
        a.iters,
        100.0 * outcome.success_rate(),
        100.0 * clean.top1,
        100.0 * attacked.top1,
        set.len()
    );
    write_json(
        &a.out.join("attack.json"),
        &json!({
            "model": run.config.model.name,
            "images": set.len(),
            "attack": attack,
            "success_rate": outcome.success_rate(),
            "clean_top1": clean.top1,
            "attack_top1": attacked.top1,
            "linf_per_step": outcome.linf_per_step,
        }),
    )?;
    let mut resolved = run_resolved(&run, &a.run);
    resolved["attack"] = serde_json::to_value(attack)?;
    resolved["images"] = json!(a.images);
    resolved["seed"] = json!(a.seed);
    Ok(Outcome { out: a.out, resolved, passed: true })
}

fn dispatch(command: Command) -> Result<(&'static str, Outcome)> {
    Ok(match command {
        Command::Count(a) => ("count", cmd_count(a)?),
        Command::Gradcheck(a) => ("gradcheck", cmd_gradcheck(a)?),
        Command::Oracle(a) => ("oracle", cmd_oracle(a)?),
        Command::Train(a) => ("train", cmd_train(a)?),
        Command::Eval(a) => ("eval", cmd_eval(a)?),
        Command::Robust(a) => ("robust", cmd_robust(a)?),
        Command::Attack(a) => ("attack", cmd_attack(a)?),
    })
}

fn write_manifest(name: &str, outcome: &Outcome, started: SystemTime, elapsed: f64) -> Result<()> {
    if !outcome.out.is_dir() {
        return Ok(());
    }
    let started_at = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "command": name,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "resolved": outcome.resolved,
        "passed": outcome.passed,
        "version": san_core::VERSION,
        "started_at": started_at,
        "elapsed_seconds": elapsed,
    });
    write_json(&outcome.out.join("manifest.json"), &manifest)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<san_core::Error>() {
        Some(san_core::Error::Config(_) | san_core::Error::Usage(_) | san_core::Error::Dataset(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let (started, clock) = (SystemTime::now(), Instant::now());
    let result = dispatch(cli.command)
        .and_then(|(name, outcome)| write_manifest(name, &outcome, started, clock.elapsed().as_secs_f64()).map(|_| outcome));
    match result {
        Ok(outcome) if outcome.passed => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
