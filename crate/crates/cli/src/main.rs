//! `deepmoe` command line: training, evaluation, FLOPs reports and the gate analyses.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! runtime failures. Every artifact is written atomically.

// `!(a < b)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use deepmoe::analysis::{
    embedding_dump_csv, gate_stats_csv, gate_stats_from_inference, gate_trace_csv, lambda_sweep, param_breakdown,
    shuffle_embedding_experiment, sweep_csv, widening_comparison, widening_csv, BudgetMode,
};
use deepmoe::flops::{dynamic_flops_from_inference, static_flops};
use deepmoe::gradcheck::{finite_diff_gradcheck_with, DeepMoeObjective, GradcheckOptions};
use deepmoe::io::{write_atomic, write_json, Csv};
use deepmoe::model::presets::{self, WideningPreset};
use deepmoe::model::{GateSource, DEFAULT_INFERENCE_BATCH};
use deepmoe::training::{evaluate, make_synthetic, prepare_data, train_procedure1_with, Dataset, Precision, TrainConfig};
use deepmoe::{build_deepmoe, DeepMoe, Error, ModelConfig, Scalar};

#[derive(Parser, Debug)]
#[command(name = "deepmoe", version, about = "Train and analyse sparsely gated convolutional networks")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-phase training; writes metrics.csv, checkpoint.bin and summary.json.
    Train(TrainArgs),
    /// Sparse-path evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Static FLOPs report (dynamic too when a checkpoint and data are given).
    Flops(FlopsArgs),
    /// Finite-difference check of the full objective's gradients.
    Gradcheck(GradcheckArgs),
    /// Gate-embedding shuffling between coarse groups.
    Shuffle(ShuffleArgs),
    /// λ sweep, or widening-preset comparison with --widening.
    Sweep(SweepArgs),
    /// Gate support statistics and the raw gate trace.
    Gatestats(GatestatsArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Model config JSON.
    #[arg(long, conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// Shipped model preset name.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct TrainOverrides {
    /// Train config JSON.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainOverrides,
    /// Parameters written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Class count for presets.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// With --train, also measure dynamic FLOPs on the validation split.
    #[arg(long, requires = "train")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    /// Output directory; the static report goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Defaults to the gradcheck-toy preset.
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, default_value_t = 60)]
    coords: usize,
    #[arg(long, default_value_t = 6)]
    batch: usize,
    /// Precision of the analytic gradients: f32 or f64.
    #[arg(long, default_value = "f64", value_parser = ["f32", "f64"])]
    precision: String,
    /// Maximum relative error tolerated; exit 1 above it.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ShuffleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainOverrides,
    /// Trains a model first when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    /// Comma-separated target classes; all classes by default.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainOverrides,
    /// Comma-separated ascending λ values.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    /// Comma-separated seeds; defaults to the train config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Compare VGG-16 widening presets (comma-separated) instead of sweeping λ.
    #[arg(long, value_delimiter = ',')]
    widening: Vec<String>,
    /// Widening budget mode: params or params+flops.
    #[arg(long, default_value = "params")]
    budget: String,
    /// Channel divisor applied to the VGG-16 presets.
    #[arg(long, default_value_t = 16)]
    divisor: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GatestatsArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Monomorphize a generic command for the configured precision.
macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Train(a) => {
            let (mcfg, tcfg) = resolve(&a.model, &a.train)?;
            dispatch!(tcfg.precision, train_cmd(&mcfg, &tcfg, &a.out))
        }
        Command::Eval(a) => {
            let (mcfg, tcfg) = resolve(&a.model, &a.train)?;
            dispatch!(tcfg.precision, eval_cmd(&mcfg, &tcfg, &a.checkpoint, &a.out))
        }
        Command::Flops(a) => flops_cmd(&a),
        Command::Gradcheck(a) => match a.precision.as_str() {
            "f32" => gradcheck_cmd::<f32>(&a),
            _ => gradcheck_cmd::<f64>(&a),
        },
        Command::Shuffle(a) => {
            let (mcfg, tcfg) = resolve(&a.model, &a.train)?;
            dispatch!(tcfg.precision, shuffle_cmd(&mcfg, &tcfg, &a))
        }
        Command::Sweep(a) => {
            let tcfg = load_train(&a.train)?;
            if a.widening.is_empty() {
                let mcfg = load_model(&a.model, tcfg.data.num_classes())?;
                dispatch!(tcfg.precision, sweep_cmd(&mcfg, &tcfg, &a))
            } else {
                dispatch!(tcfg.precision, widening_cmd(&tcfg, &a))
            }
        }
        Command::Gatestats(a) => {
            let (mcfg, tcfg) = resolve(&a.model, &a.train)?;
            dispatch!(tcfg.precision, gatestats_cmd(&mcfg, &tcfg, &a))
        }
    }
}

fn read_text(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_model(args: &ModelArgs, classes: usize) -> CliResult<ModelConfig> {
    let cfg = match (&args.model, &args.preset) {
        (Some(path), _) => ModelConfig::from_json(&read_text(path, "model config")?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        (None, Some(name)) => presets::preset(name, classes)?,
        (None, None) => return Err(CliError::Usage("one of --model or --preset is required".into())),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_train(args: &TrainOverrides) -> CliResult<TrainConfig> {
    let path = &args.train;
    let mut cfg = TrainConfig::from_json(&read_text(path, "train config")?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if let Some(m) = args.mu {
        cfg.mu = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(model: &ModelArgs, train: &TrainOverrides) -> CliResult<(ModelConfig, TrainConfig)> {
    let tcfg = load_train(train)?;
    let mcfg = load_model(model, tcfg.data.num_classes())?;
    if mcfg.num_classes != tcfg.data.num_classes() {
        return Err(CliError::Usage(format!(
            "model has {} classes but the data has {}",
            mcfg.num_classes,
            tcfg.data.num_classes()
        )));
    }
    Ok((mcfg, tcfg))
}

fn data<T: Scalar>(mcfg: &ModelConfig, tcfg: &TrainConfig) -> CliResult<(Dataset<T>, Dataset<T>)> {
    Ok(prepare_data::<T>(&tcfg.data, mcfg.in_channels, mcfg.image_size, mcfg.num_classes, tcfg.seed)?)
}

fn load_checkpoint<T: Scalar>(mcfg: &ModelConfig, seed: u64, path: &Path) -> CliResult<DeepMoe<T>> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let mut model = build_deepmoe::<T>(mcfg, seed)?;
    model.params.load(path)?;
    Ok(model)
}

fn trained<T: Scalar>(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    checkpoint: Option<&Path>,
    train: &Dataset<T>,
    val: &Dataset<T>,
) -> CliResult<DeepMoe<T>> {
    if let Some(path) = checkpoint {
        return load_checkpoint(mcfg, tcfg.seed, path);
    }
    let mut model = build_deepmoe::<T>(mcfg, tcfg.seed)?;
    let cfg = TrainConfig { eval_every_epoch: false, ..tcfg.clone() };
    train_procedure1_with(&mut model, train, Some(val), &cfg, |m| {
        eprintln!("epoch {} phase {} loss {:.5}", m.epoch, m.phase, m.train_loss)
    })?;
    Ok(model)
}

fn train_cmd<T: Scalar>(mcfg: &ModelConfig, tcfg: &TrainConfig, out: &Path) -> CliResult {
    let (train, val) = data::<T>(mcfg, tcfg)?;
    let mut model = build_deepmoe::<T>(mcfg, tcfg.seed)?;
    let report = train_procedure1_with(&mut model, &train, Some(&val), tcfg, |m| {
        let val = m.val_top1.map_or(String::new(), |e| format!(" val_top1 {e:.4}"));
        eprintln!("epoch {} phase {} lr {} loss {:.5}{val}", m.epoch, m.phase, m.lr, m.train_loss);
    })?;
    report.metrics_csv().write(&out.join("metrics.csv"))?;
    let mut bytes = Vec::new();
    model.params.write_checkpoint(&mut bytes)?;
    write_atomic(&out.join("checkpoint.bin"), &bytes)?;
    write_atomic(&out.join("model.json"), mcfg.to_json().as_bytes())?;
    write_atomic(&out.join("train.json"), tcfg.to_json().as_bytes())?;
    let t = evaluate(&model, &train)?;
    let v = evaluate(&model, &val)?;
    let [base, emb, gate] = param_breakdown(&model).map(|(_, n)| n);
    write_json(
        &out.join("summary.json"),
        &json!({
            "model": mcfg.name,
            "epochs": tcfg.epochs(),
            "train_top1_error": t.top1_error,
            "val_top1_error": v.top1_error,
            "val_loss": v.mean_loss,
            "mean_active_fraction": v.mean_active_fraction(),
            "mean_gate_sparsity": v.mean_gate_sparsity,
            "static_flops": v.flops.static_flops(),
            "dynamic_flops": v.flops.dynamic_flops(),
            "params": { "base": base, "embedding": emb, "gate": gate },
            "checksums": {
                "phase1_end": { "embedding": report.phase1_end.embedding, "gate": report.phase1_end.gate },
                "final": { "embedding": report.final_state.embedding, "gate": report.final_state.gate },
            },
        }),
    )?;
    println!("train top-1 error {:.4}, val top-1 error {:.4}", t.top1_error, v.top1_error);
    Ok(())
}

fn eval_cmd<T: Scalar>(mcfg: &ModelConfig, tcfg: &TrainConfig, checkpoint: &Path, out: &Path) -> CliResult {
    let model = load_checkpoint::<T>(mcfg, tcfg.seed, checkpoint)?;
    let (_, val) = data::<T>(mcfg, tcfg)?;
    let inf = model.infer(&val.images, DEFAULT_INFERENCE_BATCH, GateSource::Learned)?;
    let report = deepmoe::training::summarize(&model, &val, &inf)?;
    report.flops.to_csv().write(&out.join("flops.csv"))?;
    gate_trace_csv(&model, &inf).write(&out.join("gate_trace.csv"))?;
    embedding_dump_csv(&inf, &val.labels).write(&out.join("embeddings.csv"))?;
    let active: serde_json::Map<String, serde_json::Value> =
        report.active_fraction.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    write_json(
        &out.join("eval.json"),
        &json!({
            "examples": report.examples,
            "top1_error": report.top1_error,
            "mean_loss": report.mean_loss,
            "mean_gate_sparsity": report.mean_gate_sparsity,
            "active_fraction": active,
            "static_flops": report.flops.static_flops(),
            "dynamic_flops": report.flops.dynamic_flops(),
        }),
    )?;
    println!("top-1 error {:.4} on {} examples", report.top1_error, report.examples);
    Ok(())
}

fn flops_cmd(a: &FlopsArgs) -> CliResult {
    let (mcfg, tcfg) = match &a.train {
        Some(path) => {
            let t = load_train(&TrainOverrides { train: path.clone(), seed: None, lambda: None, mu: None })?;
            (load_model(&a.model, t.data.num_classes())?, Some(t))
        }
        None => (load_model(&a.model, a.classes)?, None),
    };
    let report = static_flops(&mcfg)?.to_csv();
    match &a.out {
        Some(dir) => report.write(&dir.join("flops_static.csv"))?,
        None => print!("{}", report.render()),
    }
    if let (Some(ckpt), Some(tcfg)) = (&a.checkpoint, tcfg) {
        dispatch!(tcfg.precision, dynamic_flops_cmd(&mcfg, &tcfg, ckpt, a.out.as_deref()))?;
    }
    Ok(())
}

fn dynamic_flops_cmd<T: Scalar>(mcfg: &ModelConfig, tcfg: &TrainConfig, ckpt: &Path, out: Option<&Path>) -> CliResult {
    let model = load_checkpoint::<T>(mcfg, tcfg.seed, ckpt)?;
    let (_, val) = data::<T>(mcfg, tcfg)?;
    let inf = model.infer(&val.images, DEFAULT_INFERENCE_BATCH, GateSource::Learned)?;
    let report = dynamic_flops_from_inference(&model, &inf)?.to_csv();
    match out {
        Some(dir) => report.write(&dir.join("flops_dynamic.csv"))?,
        None => print!("{}", report.render()),
    }
    Ok(())
}

fn gradcheck_cmd<T: Scalar>(a: &GradcheckArgs) -> CliResult {
    let classes = 3;
    let mcfg = if a.model.model.is_none() && a.model.preset.is_none() {
        presets::gradcheck_toy(classes)
    } else {
        load_model(&a.model, classes)?
    };
    let model = build_deepmoe::<T>(&mcfg, a.seed)?;
    let data = make_synthetic::<T>(a.batch.max(mcfg.num_classes), mcfg.num_classes, mcfg.image_size, a.seed)?;
    let objective = DeepMoeObjective::new(&model, data.labels.clone(), a.lambda, a.mu);
    let h = if T::NAME == "f64" { 1e-4 } else { 1e-3 };
    let report = finite_diff_gradcheck_with(&objective, &model.params, &data.images, GradcheckOptions::new(a.coords, h, a.seed))?;
    let mut csv = Csv::new(&["param", "group", "index", "analytic", "numeric", "rel_error"]);
    for c in &report.checks {
        csv.push(vec![
            c.param.clone(),
            format!("{:?}", c.group).to_lowercase(),
            c.index.to_string(),
            c.analytic.to_string(),
            c.numeric.to_string(),
            c.rel_error.to_string(),
        ]);
    }
    match &a.out {
        Some(dir) => {
            csv.write(&dir.join("gradcheck.csv"))?;
            write_json(
                &dir.join("gradcheck.json"),
                &json!({
                    "model": mcfg.name,
                    "precision": a.precision,
                    "h": h,
                    "checked": report.checked(),
                    "skipped_kinks": report.skipped_kinks,
                    "max_rel_error": report.max_rel_error,
                }),
            )?;
        }
        None => print!("{}", csv.render()),
    }
    println!(
        "checked {} coordinates ({} skipped near kinks), max relative error {:.3e}",
        report.checked(),
        report.skipped_kinks,
        report.max_rel_error
    );
    if let Some(tol) = a.tolerance {
        if !(report.max_rel_error < tol) {
            return Err(CliError::Runtime(Error::Contract(format!(
                "max relative error {:.3e} exceeds tolerance {tol:e}",
                report.max_rel_error
            ))));
        }
    }
    Ok(())
}

fn shuffle_cmd<T: Scalar>(mcfg: &ModelConfig, tcfg: &TrainConfig, a: &ShuffleArgs) -> CliResult {
    let (train, val) = data::<T>(mcfg, tcfg)?;
    let model = trained(mcfg, tcfg, a.checkpoint.as_deref(), &train, &val)?;
    let targets: Vec<usize> = if a.targets.is_empty() { (0..mcfg.num_classes).collect() } else { a.targets.clone() };
    let result = shuffle_embedding_experiment(&model, &train, &targets, a.repeats, tcfg.seed)?;
    result.to_csv().write(&a.out.join("shuffle.csv"))?;
    write_json(
        &a.out.join("shuffle.json"),
        &json!({
            "repeats": result.repeats,
            "mean_in_group": result.mean_in_group(),
            "mean_out_group": result.mean_out_group(),
            "identity_matches_baseline": result.identity_matches_baseline,
        }),
    )?;
    println!(
        "in-group accuracy {:.4}, out-of-group accuracy {:.4}, identity donors reproduce baseline: {}",
        result.mean_in_group(),
        result.mean_out_group(),
        result.identity_matches_baseline
    );
    Ok(())
}

fn seeds(a: &SweepArgs, tcfg: &TrainConfig) -> Vec<u64> {
    if a.seeds.is_empty() {
        vec![tcfg.seed]
    } else {
        a.seeds.clone()
    }
}

fn sweep_cmd<T: Scalar>(mcfg: &ModelConfig, tcfg: &TrainConfig, a: &SweepArgs) -> CliResult {
    let rows = lambda_sweep::<T>(mcfg, tcfg, &a.grid, &seeds(a, tcfg))?;
    sweep_csv(&rows).write(&a.out.join("sweep.csv"))?;
    let failed = rows.iter().filter(|r| r.result.is_none()).count();
    println!("{} runs, {failed} failed", rows.len());
    Ok(())
}

fn widening_cmd<T: Scalar>(tcfg: &TrainConfig, a: &SweepArgs) -> CliResult {
    let mode = BudgetMode::parse(&a.budget)?;
    let presets = a.widening.iter().map(|s| WideningPreset::parse(s)).collect::<Result<Vec<_>, _>>()?;
    let rows = widening_comparison::<T>(&presets, mode, tcfg, a.divisor, &a.grid)?;
    widening_csv(&rows).write(&a.out.join("widening.csv"))?;
    println!("{} presets compared", rows.len());
    Ok(())
}

fn gatestats_cmd<T: Scalar>(mcfg: &ModelConfig, tcfg: &TrainConfig, a: &GatestatsArgs) -> CliResult {
    let (train, val) = data::<T>(mcfg, tcfg)?;
    let model = trained(mcfg, tcfg, a.checkpoint.as_deref(), &train, &val)?;
    let inf = model.infer(&val.images, DEFAULT_INFERENCE_BATCH, GateSource::Learned)?;
    let stats = gate_stats_from_inference(&model, &inf);
    gate_stats_csv(&stats).write(&a.out.join("gate_stats.csv"))?;
    gate_trace_csv(&model, &inf).write(&a.out.join("gate_trace.csv"))?;
    write_json(&a.out.join("gate_stats.json"), &stats)?;
    for l in &stats.layers {
        println!("{}: {} distinct supports, mean active fraction {:.4}", l.head, l.distinct_supports, l.mean_active_fraction);
    }
    Ok(())
}
