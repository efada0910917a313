use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::data::{augment_batch, Dataset};
use super::eval::evaluate;
use super::loss::deepmoe_loss;
use crate::error::{Error, Result};
use crate::flops::static_flops_plan;
use crate::graph::Graph;
use crate::io::Csv;
use crate::model::{DeepMoe, ForwardOptions};
use crate::optim::Sgd;
use crate::params::ParamGroup;
use crate::scalar::Scalar;

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "phase",
    "lr",
    "train_loss",
    "val_loss",
    "val_top1",
    "mean_gate_sparsity",
    "dynamic_flops",
    "static_flops",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    /// Mean objective over the epoch's batches (phase weights applied).
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Top-1 error fraction.
    pub val_top1: Option<f64>,
    pub mean_gate_sparsity: Option<f64>,
    /// Mean per-example FLOPs of the evaluated split.
    pub dynamic_flops: Option<f64>,
    pub static_flops: u64,
}

/// Checksums of the parameter groups frozen in phase 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrozenChecksums {
    pub embedding: u64,
    pub gate: u64,
}

impl FrozenChecksums {
    pub fn of<T: Scalar>(model: &DeepMoe<T>) -> Self {
        Self {
            embedding: model.params.checksum(Some(ParamGroup::Embedding)),
            gate: model.params.checksum(Some(ParamGroup::Gate)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    /// Taken when phase 2 begins.
    pub phase1_end: FrozenChecksums,
    pub final_state: FrozenChecksums,
}

impl TrainReport {
    pub fn lr_trace(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.lr).collect()
    }

    pub fn metrics_csv(&self) -> Csv {
        let mut csv = Csv::new(&METRICS_HEADER);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in &self.metrics {
            csv.push(vec![
                m.epoch.to_string(),
                m.phase.to_string(),
                m.lr.to_string(),
                m.train_loss.to_string(),
                opt(m.val_loss),
                opt(m.val_top1),
                opt(m.mean_gate_sparsity),
                opt(m.dynamic_flops),
                m.static_flops.to_string(),
            ]);
        }
        csv
    }
}

/// Mean objective of one pass over `data` in shuffled batches, updating the model.
#[allow(clippy::too_many_arguments)]
fn run_epoch<T: Scalar>(
    model: &mut DeepMoe<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    opt: &mut Sgd<T>,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    lr: f64,
    (lambda, mu): (f64, f64),
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for idx in order.chunks(cfg.batch_size) {
        let mut images = data.images.gather_rows(idx);
        if cfg.augment {
            images = augment_batch(&images, rng, cfg.max_shift)?;
        }
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut graph = Graph::new();
        let x = graph.constant(images);
        let out = model.forward(&mut graph, x, ForwardOptions::train())?;
        let terms = deepmoe_loss(&mut graph, out.logits, out.aux_logits, &out.gates, &labels, lambda, mu)?;
        let loss = graph.value(terms.total).item().to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss, detail: "non-finite objective".into() });
        }
        graph.backward(terms.total)?;
        let grads = graph.param_grads(&model.params);
        model.update_running_stats(&graph);
        opt.step(&mut model.params, grads, lr)?;
        total += loss * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Two-phase training: `n0` joint epochs on the full objective, then `n1`
/// epochs of the base network alone with the embedding net and gate heads
/// frozen (still producing gates) and `λ = μ = 0`.
pub fn train_procedure1<T: Scalar>(
    model: &mut DeepMoe<T>,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_procedure1_with(model, train, val, cfg, |_| {})
}

/// [`train_procedure1`] with a callback after every epoch.
pub fn train_procedure1_with<T: Scalar>(
    model: &mut DeepMoe<T>,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() && cfg.epochs() > 0 {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    let static_flops = static_flops_plan(&model.config.name, &model.plan).static_flops();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut metrics = Vec::with_capacity(cfg.epochs());
    let mut phase1_end = FrozenChecksums::of(model);
    for epoch in 0..cfg.epochs() {
        let phase = if epoch < cfg.n0 { 1 } else { 2 };
        if epoch == cfg.n0 {
            phase1_end = FrozenChecksums::of(model);
            opt.frozen = vec![ParamGroup::Embedding, ParamGroup::Gate];
        }
        let weights = if phase == 1 { (cfg.lambda, cfg.mu) } else { (0.0, 0.0) };
        let lr = cfg.lr.lr(epoch);
        let train_loss = match run_epoch(model, train, cfg, &mut opt, &mut rng, epoch, lr, weights) {
            Err(Error::NonFinite { op }) => {
                let detail = format!("non-finite values produced by {op}");
                return Err(Error::Divergence { epoch, loss: f64::NAN, detail });
            }
            other => other?,
        };
        let report = match val {
            Some(v) if cfg.eval_every_epoch => Some(evaluate(model, v)?),
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            phase,
            lr,
            train_loss,
            val_loss: report.as_ref().map(|r| r.mean_loss),
            val_top1: report.as_ref().map(|r| r.top1_error),
            mean_gate_sparsity: report.as_ref().map(|r| r.mean_gate_sparsity),
            dynamic_flops: report.as_ref().map(|r| r.flops.dynamic_flops()),
            static_flops,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    if cfg.n1 == 0 {
        phase1_end = FrozenChecksums::of(model);
    }
    Ok(TrainReport { metrics, phase1_end, final_state: FrozenChecksums::of(model) })
}
