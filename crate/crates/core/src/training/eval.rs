use super::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::{dynamic_flops_from_inference, executed_counts, FlopsReport};
use crate::graph::Graph;
use crate::model::{DeepMoe, GateSource, InferenceOutput, DEFAULT_INFERENCE_BATCH};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub examples: usize,
    /// Fraction of examples whose arg-max logit is not the label.
    pub top1_error: f64,
    /// Mean classification loss of the base network.
    pub mean_loss: f64,
    /// Mean fraction of live input channels per gated layer, in plan order.
    pub active_fraction: Vec<(String, f64)>,
    /// Mean over gate heads of the fraction of exactly-zero gates.
    pub mean_gate_sparsity: f64,
    pub flops: FlopsReport,
}

impl EvalReport {
    pub fn top1_accuracy(&self) -> f64 {
        1.0 - self.top1_error
    }

    pub fn mean_active_fraction(&self) -> f64 {
        if self.active_fraction.is_empty() {
            return 1.0;
        }
        self.active_fraction.iter().map(|(_, f)| f).sum::<f64>() / self.active_fraction.len() as f64
    }
}

pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn top1_error<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let wrong = predictions(logits).iter().zip(labels).filter(|(p, l)| p != l).count();
    wrong as f64 / labels.len().max(1) as f64
}

pub fn mean_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::inference();
    let v = g.constant(logits.clone());
    let l = g.softmax_cross_entropy(v, labels)?;
    Ok(g.value(l).item().to_f64_lossy())
}

/// Metrics of an inference pass with the given gate source.
pub fn evaluate_with<T: Scalar>(model: &DeepMoe<T>, data: &Dataset<T>, gates: GateSource<'_, T>) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    let out = model.infer(&data.images, DEFAULT_INFERENCE_BATCH, gates)?;
    summarize(model, data, &out)
}

/// Sparse-path evaluation with the model's own gates.
pub fn evaluate<T: Scalar>(model: &DeepMoe<T>, data: &Dataset<T>) -> Result<EvalReport> {
    evaluate_with(model, data, GateSource::Learned)
}

pub fn summarize<T: Scalar>(model: &DeepMoe<T>, data: &Dataset<T>, out: &InferenceOutput<T>) -> Result<EvalReport> {
    let n = data.len();
    let counts = executed_counts(model, out)?;
    let active_fraction = out
        .activity
        .iter()
        .map(|(layer, c)| {
            let width = model
                .plan
                .convs()
                .iter()
                .find(|k| &k.name == layer)
                .map(|k| k.c_in)
                .unwrap_or(model.plan.classifier.d_in);
            (layer.clone(), c.iter().sum::<usize>() as f64 / (n * width) as f64)
        })
        .collect();
    let mean_gate_sparsity = if counts.is_empty() {
        0.0
    } else {
        let per_head = model.plan.heads.iter().zip(&counts).map(|(h, c)| {
            1.0 - c.iter().sum::<usize>() as f64 / (n * h.width) as f64
        });
        per_head.sum::<f64>() / counts.len() as f64
    };
    Ok(EvalReport {
        examples: n,
        top1_error: top1_error(&out.logits, &data.labels),
        mean_loss: mean_cross_entropy(&out.logits, &data.labels)?,
        active_fraction,
        mean_gate_sparsity,
        flops: dynamic_flops_from_inference(model, out)?,
    })
}
