//! Gate behaviour analyses: embedding shuffling, regularization sweeps,
//! gate-support diversity and widening-strategy comparison.

use std::collections::{BTreeMap, HashSet};
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{static_flops, static_flops_plan, CostGroup};
use crate::io::Csv;
use crate::model::presets::{vgg16_scaled, vgg16_widened_scaled, WideningPreset};
use crate::model::{build_deepmoe, compile, DeepMoe, GateSource, InferenceOutput, ModelConfig, DEFAULT_INFERENCE_BATCH};
use crate::params::ParamGroup;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{evaluate, prepare_data, top1_error, train_procedure1, Dataset, EvalReport, TrainConfig};

fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    1.0 - top1_error(logits, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleClassResult {
    pub class: usize,
    pub examples: usize,
    pub baseline_acc: f64,
    pub in_group_acc: f64,
    pub out_group_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleResult {
    pub repeats: usize,
    pub classes: Vec<ShuffleClassResult>,
    /// Logits with every example's own embedding as donor equal the
    /// unshuffled logits bit for bit.
    pub identity_matches_baseline: bool,
}

impl ShuffleResult {
    pub fn mean_in_group(&self) -> f64 {
        self.classes.iter().map(|c| c.in_group_acc).sum::<f64>() / self.classes.len().max(1) as f64
    }

    pub fn mean_out_group(&self) -> f64 {
        self.classes.iter().map(|c| c.out_group_acc).sum::<f64>() / self.classes.len().max(1) as f64
    }

    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&["class", "examples", "baseline_acc", "in_group_acc", "out_group_acc"]);
        for c in &self.classes {
            csv.push(vec![
                c.class.to_string(),
                c.examples.to_string(),
                c.baseline_acc.to_string(),
                c.in_group_acc.to_string(),
                c.out_group_acc.to_string(),
            ]);
        }
        csv
    }
}

/// Mean accuracy over `repeats` draws of donor embeddings from `pool` for the
/// examples `members`. Each draw shuffles the pool and assigns donors without
/// replacement, cycling the permutation when the pool is smaller.
fn donor_accuracy<T: Scalar>(
    model: &DeepMoe<T>,
    data: &Dataset<T>,
    embeddings: &Tensor<T>,
    members: &[usize],
    pool: &[usize],
    repeats: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let images = data.images.gather_rows(members);
    let labels: Vec<usize> = members.iter().map(|&i| data.labels[i]).collect();
    let mut total = 0.0;
    for _ in 0..repeats {
        let mut perm = pool.to_vec();
        perm.shuffle(rng);
        let donors: Vec<usize> = (0..members.len()).map(|j| perm[j % perm.len()]).collect();
        let d = embeddings.gather_rows(&donors);
        let out = model.infer(&images, DEFAULT_INFERENCE_BATCH, GateSource::Donor(&d))?;
        total += accuracy(&out.logits, &labels);
    }
    Ok(total / repeats as f64)
}

/// For each target class, accuracy when every input's gates come from the
/// embedding of a random example of another class in the same coarse group
/// (in-group) or of a different coarse group (out-of-group). The base network
/// is otherwise unchanged.
pub fn shuffle_embedding_experiment<T: Scalar>(
    model: &DeepMoe<T>,
    data: &Dataset<T>,
    targets: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<ShuffleResult> {
    let coarse = data.coarse.as_ref().ok_or_else(|| Error::Contract("shuffling needs coarse labels".into()))?;
    if repeats == 0 {
        return Err(Error::Contract("shuffling needs at least one repeat".into()));
    }
    let base = model.infer(&data.images, DEFAULT_INFERENCE_BATCH, GateSource::Learned)?;
    let identity = model.infer(&data.images, DEFAULT_INFERENCE_BATCH, GateSource::Donor(&base.embeddings))?;
    let identity_matches_baseline = identity.logits == base.logits;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::with_capacity(targets.len());
    for &class in targets {
        let members = data.indices_of_class(class);
        let Some(&first) = members.first() else {
            return Err(Error::Contract(format!("class {class} does not occur in the dataset")));
        };
        let group = coarse[first];
        let in_pool: Vec<usize> =
            (0..data.len()).filter(|&i| data.labels[i] != class && coarse[i] == group).collect();
        let out_pool: Vec<usize> = (0..data.len()).filter(|&i| coarse[i] != group).collect();
        if in_pool.is_empty() || out_pool.is_empty() {
            return Err(Error::Contract(format!("class {class} lacks in-group or out-of-group donors")));
        }
        let labels: Vec<usize> = members.iter().map(|&i| data.labels[i]).collect();
        let baseline_acc = accuracy(&base.logits.gather_rows(&members), &labels);
        let in_group_acc = donor_accuracy(model, data, &base.embeddings, &members, &in_pool, repeats, &mut rng)?;
        let out_group_acc = donor_accuracy(model, data, &base.embeddings, &members, &out_pool, repeats, &mut rng)?;
        classes.push(ShuffleClassResult { class, examples: members.len(), baseline_acc, in_group_acc, out_group_acc });
    }
    Ok(ShuffleResult { repeats, classes, identity_matches_baseline })
}

/// Outcome of one trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean_active_fraction: f64,
    pub dynamic_flops: f64,
    pub static_flops: u64,
    pub val_top1: f64,
    pub train_top1: f64,
}

impl RunSummary {
    fn from_reports(static_flops: u64, train: &EvalReport, val: &EvalReport) -> Self {
        Self {
            mean_active_fraction: val.mean_active_fraction(),
            dynamic_flops: val.flops.dynamic_flops(),
            static_flops,
            val_top1: val.top1_error,
            train_top1: train.top1_error,
        }
    }
}

/// Build, train and evaluate one model; `seed` drives initialization, data and
/// batch order.
pub fn train_and_summarize<T: Scalar>(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<(DeepMoe<T>, RunSummary)> {
    let (train, val) = prepare_data::<T>(
        &train_cfg.data,
        model_cfg.in_channels,
        model_cfg.image_size,
        model_cfg.num_classes,
        train_cfg.seed,
    )?;
    let mut model = build_deepmoe::<T>(model_cfg, train_cfg.seed)?;
    let cfg = TrainConfig { eval_every_epoch: false, ..train_cfg.clone() };
    train_procedure1(&mut model, &train, Some(&val), &cfg)?;
    let static_flops = static_flops_plan(&model_cfg.name, &model.plan).static_flops();
    let summary = RunSummary::from_reports(static_flops, &evaluate(&model, &train)?, &evaluate(&model, &val)?);
    Ok((model, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    /// `None` when the run failed (for instance diverged).
    pub result: Option<RunSummary>,
    pub error: Option<String>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Csv {
    let mut csv = Csv::new(&[
        "lambda",
        "seed",
        "status",
        "mean_active_fraction",
        "dynamic_flops",
        "static_flops",
        "val_top1",
        "train_top1",
        "error",
    ]);
    for r in rows {
        let mut row = vec![r.lambda.to_string(), r.seed.to_string()];
        match &r.result {
            Some(s) => row.extend([
                "ok".to_string(),
                s.mean_active_fraction.to_string(),
                s.dynamic_flops.to_string(),
                s.static_flops.to_string(),
                s.val_top1.to_string(),
                s.train_top1.to_string(),
                String::new(),
            ]),
            None => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 5));
                row.push(r.error.clone().unwrap_or_default());
            }
        }
        csv.push(row);
    }
    csv
}

/// Run independent jobs on up to `available_parallelism` threads, returning
/// results in job order.
pub fn run_parallel<J: Sync, R: Send>(jobs: &[J], f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let mut out: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..jobs.len()).step_by(workers).map(|i| (i, f(&jobs[i]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// One trained model per `(λ, seed)`, rows ordered by λ then seed. Failed runs
/// are recorded, not propagated.
pub fn lambda_sweep<T: Scalar>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("λ grid must be nonempty and strictly ascending".into()));
    }
    let jobs: Vec<(f64, u64)> = grid.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    Ok(run_parallel(&jobs, |&(lambda, seed)| {
        let cfg = TrainConfig { lambda, seed, ..train_cfg.clone() };
        match train_and_summarize::<T>(model_cfg, &cfg) {
            Ok((_, s)) => SweepRow { lambda, seed, result: Some(s), error: None },
            Err(e) => SweepRow { lambda, seed, result: None, error: Some(e.to_string()) },
        }
    }))
}

/// Channel indices with a strictly positive gate, per example.
pub fn supports<T: Scalar>(gates: &Tensor<T>) -> Vec<Vec<usize>> {
    let w = gates.shape()[1];
    gates
        .data()
        .chunks(w)
        .map(|r| r.iter().enumerate().filter(|(_, &v)| v > T::zero()).map(|(i, _)| i).collect())
        .collect()
}

/// `|A ∩ B| / |A ∪ B|` for sorted index sets; two empty sets are identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub const HISTOGRAM_BINS: usize = 10;

/// Counts over `[0, 1]` in equal bins; 1.0 falls in the last bin.
fn histogram(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let mut h = vec![0; HISTOGRAM_BINS];
    for v in values {
        let b = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        h[b] += 1;
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGateStats {
    pub head: String,
    pub width: usize,
    pub mean_active_fraction: f64,
    /// Examples per active-fraction bin (`HISTOGRAM_BINS` equal bins).
    pub active_histogram: Vec<usize>,
    pub distinct_supports: usize,
    pub jaccard_mean: f64,
    pub jaccard_min: f64,
    pub jaccard_max: f64,
    /// Example pairs per Jaccard-similarity bin.
    pub jaccard_histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub examples: usize,
    /// Examples entering the pairwise Jaccard statistics.
    pub pair_examples: usize,
    pub layers: Vec<LayerGateStats>,
}

/// Maximum examples over which pairwise Jaccard similarities are computed.
pub const JACCARD_EXAMPLES: usize = 512;

pub fn gate_stats_from_supports(heads: &[(String, usize)], per_head: &[Vec<Vec<usize>>]) -> GateStats {
    let examples = per_head.first().map_or(0, |s| s.len());
    let pair_examples = examples.min(JACCARD_EXAMPLES);
    let layers = heads
        .iter()
        .zip(per_head)
        .map(|((name, width), sup)| {
            let fractions = sup.iter().map(|s| s.len() as f64 / *width as f64);
            let distinct: HashSet<&Vec<usize>> = sup.iter().collect();
            let mut sims = Vec::new();
            for i in 0..pair_examples {
                for j in i + 1..pair_examples {
                    sims.push(jaccard(&sup[i], &sup[j]));
                }
            }
            let (mean, min, max) = if sims.is_empty() {
                (1.0, 1.0, 1.0)
            } else {
                (
                    sims.iter().sum::<f64>() / sims.len() as f64,
                    sims.iter().copied().fold(f64::INFINITY, f64::min),
                    sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            };
            LayerGateStats {
                head: name.clone(),
                width: *width,
                mean_active_fraction: fractions.clone().sum::<f64>() / examples.max(1) as f64,
                active_histogram: histogram(fractions),
                distinct_supports: distinct.len(),
                jaccard_mean: mean,
                jaccard_min: min,
                jaccard_max: max,
                jaccard_histogram: histogram(sims.into_iter()),
            }
        })
        .collect();
    GateStats { examples, pair_examples, layers }
}

/// Per-head support diversity of the model's gates over `data`.
pub fn gate_stats<T: Scalar>(model: &DeepMoe<T>, data: &Dataset<T>) -> Result<GateStats> {
    let out = model.infer(&data.images, DEFAULT_INFERENCE_BATCH, GateSource::Learned)?;
    Ok(gate_stats_from_inference(model, &out))
}

pub fn gate_stats_from_inference<T: Scalar>(model: &DeepMoe<T>, out: &InferenceOutput<T>) -> GateStats {
    let heads: Vec<(String, usize)> = model.plan.heads.iter().map(|h| (h.name.clone(), h.width)).collect();
    let per_head: Vec<_> = out.gates.iter().map(supports).collect();
    gate_stats_from_supports(&heads, &per_head)
}

pub fn gate_stats_csv(stats: &GateStats) -> Csv {
    let mut header: Vec<String> = ["head", "width", "mean_active_fraction", "distinct_supports", "jaccard_mean", "jaccard_min", "jaccard_max"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..HISTOGRAM_BINS).map(|b| format!("active_bin{b}")));
    header.extend((0..HISTOGRAM_BINS).map(|b| format!("jaccard_bin{b}")));
    let mut csv = Csv::new(&header);
    for l in &stats.layers {
        let mut row = vec![
            l.head.clone(),
            l.width.to_string(),
            l.mean_active_fraction.to_string(),
            l.distinct_supports.to_string(),
            l.jaccard_mean.to_string(),
            l.jaccard_min.to_string(),
            l.jaccard_max.to_string(),
        ];
        row.extend(l.active_histogram.iter().map(|c| c.to_string()));
        row.extend(l.jaccard_histogram.iter().map(|c| c.to_string()));
        csv.push(row);
    }
    csv
}

/// Nonzero gates only: `example_id, layer, channel, gate_value`.
pub fn gate_trace_csv<T: Scalar>(model: &DeepMoe<T>, out: &InferenceOutput<T>) -> Csv {
    let mut csv = Csv::new(&["example_id", "layer", "channel", "gate_value"]);
    let n = out.logits.shape()[0];
    for ex in 0..n {
        for (head, g) in model.plan.heads.iter().zip(&out.gates) {
            for (c, &v) in g.slab(ex).iter().enumerate() {
                if v > T::zero() {
                    csv.push(vec![ex.to_string(), head.name.clone(), c.to_string(), v.to_string()]);
                }
            }
        }
    }
    csv
}

/// Supports per head name, rebuilt from a gate-trace CSV for `examples` inputs.
pub fn supports_from_trace(csv: &Csv, examples: usize) -> Result<BTreeMap<String, Vec<Vec<usize>>>> {
    let col = |name: &str| csv.column(name).ok_or_else(|| Error::Format(format!("gate trace lacks column {name}")));
    let (ce, cl, cc) = (col("example_id")?, col("layer")?, col("channel")?);
    let mut out: BTreeMap<String, Vec<Vec<usize>>> = BTreeMap::new();
    for row in &csv.rows {
        let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("gate trace: {e}")));
        let ex = parse(&row[ce])?;
        if ex >= examples {
            return Err(Error::Format(format!("gate trace example {ex} beyond {examples}")));
        }
        out.entry(row[cl].clone()).or_insert_with(|| vec![Vec::new(); examples])[ex].push(parse(&row[cc])?);
    }
    for sup in out.values_mut().flat_map(|v| v.iter_mut()) {
        sup.sort_unstable();
    }
    Ok(out)
}

/// `example_id, class, e0, e1, ...`.
pub fn embedding_dump_csv<T: Scalar>(out: &InferenceOutput<T>, labels: &[usize]) -> Csv {
    let d = out.embeddings.shape()[1];
    let mut header = vec!["example_id".to_string(), "class".to_string()];
    header.extend((0..d).map(|i| format!("e{i}")));
    let mut csv = Csv::new(&header);
    for (ex, &label) in labels.iter().enumerate() {
        let mut row = vec![ex.to_string(), label.to_string()];
        row.extend(out.embeddings.slab(ex).iter().map(|v| v.to_string()));
        csv.push(row);
    }
    csv
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetMode {
    /// Presets share a parameter budget; trained at the configured λ.
    #[serde(rename = "params")]
    Params,
    /// Additionally pick, per preset, the λ whose dynamic cost is closest to
    /// the unwidened baseline's static cost.
    #[serde(rename = "params+flops")]
    ParamsFlops,
}

impl BudgetMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "params" => Ok(BudgetMode::Params),
            "params+flops" => Ok(BudgetMode::ParamsFlops),
            _ => Err(Error::Config(format!("unknown budget mode {s}; expected params or params+flops"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WideningRow {
    pub preset: String,
    pub gated_convs: usize,
    /// Trainable parameters of the base network (convs, norms, classifier).
    pub base_params: usize,
    /// Including embedding network and gate heads.
    pub total_params: usize,
    pub static_flops: u64,
    /// Static cost of the unwidened network at the same scale.
    pub reference_flops: u64,
    pub lambda: f64,
    pub result: Option<RunSummary>,
    pub error: Option<String>,
}

pub fn widening_csv(rows: &[WideningRow]) -> Csv {
    let mut csv = Csv::new(&[
        "preset",
        "gated_convs",
        "base_params",
        "total_params",
        "static_flops",
        "reference_flops",
        "lambda",
        "status",
        "dynamic_flops",
        "val_top1",
        "mean_active_fraction",
        "error",
    ]);
    for r in rows {
        let mut row = vec![
            r.preset.clone(),
            r.gated_convs.to_string(),
            r.base_params.to_string(),
            r.total_params.to_string(),
            r.static_flops.to_string(),
            r.reference_flops.to_string(),
            r.lambda.to_string(),
        ];
        match &r.result {
            Some(s) => row.extend([
                "ok".into(),
                s.dynamic_flops.to_string(),
                s.val_top1.to_string(),
                s.mean_active_fraction.to_string(),
                String::new(),
            ]),
            None => {
                row.extend(["failed".to_string(), String::new(), String::new(), String::new()]);
                row.push(r.error.clone().unwrap_or_default());
            }
        }
        csv.push(row);
    }
    csv
}

/// VGG-16 widening presets at `1/divisor` width, one table row each. In
/// [`BudgetMode::ParamsFlops`] every λ in `grid` is trained and the run whose
/// dynamic FLOPs best match the unwidened static FLOPs is reported.
pub fn widening_comparison<T: Scalar>(
    presets: &[WideningPreset],
    mode: BudgetMode,
    train_cfg: &TrainConfig,
    divisor: usize,
    grid: &[f64],
) -> Result<Vec<WideningRow>> {
    let classes = train_cfg.data.num_classes();
    let reference = vgg16_scaled(classes, divisor);
    let reference_flops = static_flops(&reference)?.group_static(CostGroup::Base) * 2;
    let lambdas: Vec<f64> = match mode {
        BudgetMode::Params => vec![train_cfg.lambda],
        BudgetMode::ParamsFlops => {
            if grid.is_empty() {
                return Err(Error::Config("params+flops mode needs a λ grid".into()));
            }
            grid.to_vec()
        }
    };
    let jobs: Vec<(WideningPreset, f64)> =
        presets.iter().flat_map(|&p| lambdas.iter().map(move |&l| (p, l))).collect();
    let runs = run_parallel(&jobs, |&(preset, lambda)| {
        let cfg = vgg16_widened_scaled(preset, classes, divisor);
        let tc = TrainConfig { lambda, ..train_cfg.clone() };
        (cfg.clone(), lambda, train_and_summarize::<T>(&cfg, &tc).map(|(m, s)| (m.params.count(None), s)))
    });
    let mut rows = Vec::with_capacity(presets.len());
    for chunk in runs.chunks(lambdas.len()) {
        let cfg = &chunk[0].0;
        let plan = compile(cfg)?;
        let best = chunk
            .iter()
            .filter_map(|(_, l, r)| r.as_ref().ok().map(|(_, s)| (*l, s)))
            .min_by(|a, b| {
                let da = (a.1.dynamic_flops - reference_flops as f64).abs();
                let db = (b.1.dynamic_flops - reference_flops as f64).abs();
                da.total_cmp(&db)
            });
        let error = chunk.iter().find_map(|(_, _, r)| r.as_ref().err().map(|e| e.to_string()));
        if let Some((_, Ok((count, _)))) = chunk.first().map(|(_, l, r)| (l, r)) {
            if *count != plan.total_param_count() {
                return Err(Error::Contract(format!(
                    "{}: built {count} parameters, closed form {}",
                    cfg.name,
                    plan.total_param_count()
                )));
            }
        }
        rows.push(WideningRow {
            preset: cfg.name.clone(),
            gated_convs: plan.heads.len(),
            base_params: plan.base_param_count(),
            total_params: plan.total_param_count(),
            static_flops: static_flops_plan(&cfg.name, &plan).static_flops(),
            reference_flops,
            lambda: best.map_or(chunk[0].1, |b| b.0),
            result: best.map(|b| b.1.clone()),
            error: if best.is_some() { None } else { error },
        });
    }
    Ok(rows)
}

/// Trainable parameter counts of a built model by group.
pub fn param_breakdown<T: Scalar>(model: &DeepMoe<T>) -> [(ParamGroup, usize); 3] {
    [ParamGroup::Base, ParamGroup::Embedding, ParamGroup::Gate].map(|g| (g, model.params.count(Some(g))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard(&[], &[]), 1.0);
        assert_eq!(jaccard(&[0, 1], &[1, 2]), 1.0 / 3.0);
        assert_eq!(jaccard(&[0, 1], &[0, 1]), 1.0);
        assert_eq!(jaccard(&[0], &[1]), 0.0);
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram([0.0, 0.05, 0.1, 1.0].into_iter()), vec![2, 1, 0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn parallel_preserves_order() {
        let jobs: Vec<u32> = (0..37).collect();
        assert_eq!(run_parallel(&jobs, |&j| j * 2), jobs.iter().map(|j| j * 2).collect::<Vec<_>>());
    }

    #[test]
    fn lambda_grid_must_ascend() {
        let cfg = crate::model::presets::tiny_vgg(4);
        assert!(lambda_sweep::<f32>(&cfg, &TrainConfig::default(), &[1.0, 0.5], &[0]).is_err());
        assert!(lambda_sweep::<f32>(&cfg, &TrainConfig::default(), &[], &[0]).is_err());
    }
}
