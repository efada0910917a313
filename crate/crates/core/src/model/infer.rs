use super::net::{DeepMoe, ForwardOptions, GateSource, NormMode};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_INFERENCE_BATCH: usize = 128;

/// Inference results for a whole image set, concatenated over mini-batches.
#[derive(Clone, Debug)]
pub struct InferenceOutput<T> {
    pub logits: Tensor<T>,
    pub aux_logits: Tensor<T>,
    pub embeddings: Tensor<T>,
    /// `[N, width]` per gate head.
    pub gates: Vec<Tensor<T>>,
    /// Live input channels per example for every gated layer, as executed by
    /// the sparse path, in plan order.
    pub activity: Vec<(String, Vec<usize>)>,
}

fn concat<T: Scalar>(parts: &[Tensor<T>]) -> Tensor<T> {
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut shape = parts[0].shape().to_vec();
    shape[0] = rows;
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("consistent parts")
}

fn rows<T: Scalar>(t: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let idx: Vec<usize> = (start..end).collect();
    t.gather_rows(&idx)
}

impl<T: Scalar> DeepMoe<T> {
    /// Inference-mode pass (running norm statistics, sparse gated convs).
    /// Mini-batching does not change any per-example result.
    pub fn infer(&self, images: &Tensor<T>, batch_size: usize, gates: GateSource<'_, T>) -> Result<InferenceOutput<T>> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Contract("inference on an empty batch".into()));
        }
        let batch_size = batch_size.max(1);
        let mut logits = Vec::new();
        let mut aux = Vec::new();
        let mut emb = Vec::new();
        let mut gate_parts: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.num_heads()];
        let mut activity: Vec<(String, Vec<usize>)> = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let mut graph = Graph::inference();
            let x = graph.constant(rows(images, start, end));
            let donor;
            let explicit: Vec<Tensor<T>>;
            let source = match gates {
                GateSource::Donor(d) => {
                    donor = rows(d, start, end);
                    GateSource::Donor(&donor)
                }
                GateSource::Explicit(list) => {
                    explicit = list.iter().map(|t| rows(t, start, end)).collect();
                    GateSource::Explicit(&explicit)
                }
                other => other,
            };
            let out = self.forward(&mut graph, x, ForwardOptions { gates: source, norm: NormMode::Running })?;
            logits.push(graph.value(out.logits).clone());
            aux.push(graph.value(out.aux_logits).clone());
            emb.push(graph.value(out.embedding).clone());
            for (parts, &g) in gate_parts.iter_mut().zip(&out.gates) {
                parts.push(graph.value(g).clone());
            }
            for (i, rec) in graph.channel_activity().iter().enumerate() {
                if start == 0 {
                    activity.push((rec.layer.clone(), Vec::with_capacity(n)));
                }
                activity[i].1.extend_from_slice(&rec.active);
            }
            start = end;
        }
        Ok(InferenceOutput {
            logits: concat(&logits),
            aux_logits: concat(&aux),
            embeddings: concat(&emb),
            gates: gate_parts.iter().map(|p| concat(p)).collect(),
            activity,
        })
    }
}
