//! Static and dynamic multiply-accumulate accounting.
//!
//! Convention: 1 MAC = 2 FLOPs. Convolutions and linear layers are counted;
//! biases, ReLU, batch norm and pooling are not. A gated layer's dynamic cost
//! counts only input channels whose gate is nonzero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Csv;
use crate::model::{compile, DeepMoe, GateSource, InferenceOutput, ModelConfig, ModelPlan, DEFAULT_INFERENCE_BATCH};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONVENTION: &str = "1 MAC = 2 FLOPs; conv and linear layers only (bias, ReLU, batch norm, pooling excluded)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostGroup {
    Base,
    Embedding,
    GateHead,
}

/// Cost model of one layer: `macs_per_input_channel * live input channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub group: CostGroup,
    pub inputs: usize,
    pub macs_per_input: u64,
    /// Gate head scaling this layer's inputs.
    pub gate: Option<usize>,
}

impl LayerCost {
    pub fn static_macs(&self) -> u64 {
        self.macs_per_input * self.inputs as u64
    }
}

/// Every costed layer of a plan: embedding convs and projection, gate heads,
/// base convs (with shortcuts) and the classifier.
pub fn cost_plan(plan: &ModelPlan) -> Vec<LayerCost> {
    let mut out = Vec::new();
    let emb = &plan.embedding;
    let mut c_in = plan.in_channels;
    for (i, (&c, (h, w))) in emb.channels.iter().zip(emb.spatial_trace(plan.image_size, plan.image_size)).enumerate() {
        out.push(LayerCost {
            name: format!("embed.conv{i}"),
            group: CostGroup::Embedding,
            inputs: c_in,
            macs_per_input: (9 * c * h * w) as u64,
            gate: None,
        });
        c_in = c;
    }
    out.push(LayerCost {
        name: "embed.proj".into(),
        group: CostGroup::Embedding,
        inputs: c_in,
        macs_per_input: emb.embed_dim as u64,
        gate: None,
    });
    for head in &plan.heads {
        out.push(LayerCost {
            name: head.name.clone(),
            group: CostGroup::GateHead,
            inputs: head.embed_dim,
            macs_per_input: head.width as u64,
            gate: None,
        });
    }
    for conv in plan.convs() {
        out.push(LayerCost {
            name: conv.name.clone(),
            group: CostGroup::Base,
            inputs: conv.c_in,
            macs_per_input: conv.macs(1),
            gate: conv.input_gate,
        });
    }
    let fc = &plan.classifier;
    out.push(LayerCost {
        name: fc.name.clone(),
        group: CostGroup::Base,
        inputs: fc.d_in,
        macs_per_input: fc.d_out as u64,
        gate: fc.input_gate,
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub group: CostGroup,
    pub gated: bool,
    pub static_macs: u64,
    /// Mean over examples.
    pub dynamic_macs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub reference: String,
    pub reference_static_macs: u64,
    pub reduction_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub model: String,
    pub convention: String,
    pub examples: usize,
    pub layers: Vec<LayerFlops>,
    pub static_macs: u64,
    pub dynamic_macs: f64,
    pub reductions: Vec<Reduction>,
}

impl FlopsReport {
    pub fn static_flops(&self) -> u64 {
        2 * self.static_macs
    }

    pub fn dynamic_flops(&self) -> f64 {
        2.0 * self.dynamic_macs
    }

    pub fn group_static(&self, group: CostGroup) -> u64 {
        self.layers.iter().filter(|l| l.group == group).map(|l| l.static_macs).sum()
    }

    pub fn group_dynamic(&self, group: CostGroup) -> f64 {
        self.layers.iter().filter(|l| l.group == group).map(|l| l.dynamic_macs).sum()
    }

    pub fn gated_static(&self) -> u64 {
        self.layers.iter().filter(|l| l.gated).map(|l| l.static_macs).sum()
    }

    pub fn gated_dynamic(&self) -> f64 {
        self.layers.iter().filter(|l| l.gated).map(|l| l.dynamic_macs).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerFlops> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Record the reduction of this report's dynamic total against a labelled
    /// static reference.
    pub fn add_reference(&mut self, label: &str, reference_static_macs: u64) -> Result<()> {
        let pct = reduction_percent(self.dynamic_macs, reference_static_macs as f64)?;
        self.reductions.push(Reduction {
            reference: label.to_string(),
            reference_static_macs,
            reduction_percent: pct,
        });
        Ok(())
    }

    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&["layer", "group", "gated", "static_macs", "dynamic_macs", "static_flops", "dynamic_flops"]);
        for l in &self.layers {
            csv.push(vec![
                l.name.clone(),
                serde_json::to_value(l.group).unwrap().as_str().unwrap().to_string(),
                l.gated.to_string(),
                l.static_macs.to_string(),
                format!("{}", l.dynamic_macs),
                (2 * l.static_macs).to_string(),
                format!("{}", 2.0 * l.dynamic_macs),
            ]);
        }
        csv
    }
}

/// `100 * (1 - dynamic / reference)`.
pub fn reduction_percent(dynamic: f64, reference: f64) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(Error::Contract(format!("reduction reference must be positive, got {reference}")));
    }
    Ok(100.0 * (1.0 - dynamic / reference))
}

fn build_report(name: &str, costs: &[LayerCost], dynamic: Vec<f64>, examples: usize) -> FlopsReport {
    let layers: Vec<LayerFlops> = costs
        .iter()
        .zip(dynamic)
        .map(|(c, d)| LayerFlops {
            name: c.name.clone(),
            group: c.group,
            gated: c.gate.is_some(),
            static_macs: c.static_macs(),
            dynamic_macs: d,
        })
        .collect();
    let static_macs = layers.iter().map(|l| l.static_macs).sum();
    let dynamic_macs = layers.iter().map(|l| l.dynamic_macs).sum();
    let mut report = FlopsReport {
        model: name.to_string(),
        convention: CONVENTION.to_string(),
        examples,
        layers,
        static_macs,
        dynamic_macs,
        reductions: Vec::new(),
    };
    report.add_reference("self-static", static_macs).expect("nonzero static cost");
    report
}

/// Static cost of a configuration: every channel executes.
pub fn static_flops(cfg: &ModelConfig) -> Result<FlopsReport> {
    let plan = compile(cfg)?;
    Ok(static_flops_plan(&cfg.name, &plan))
}

pub fn static_flops_plan(name: &str, plan: &ModelPlan) -> FlopsReport {
    let costs = cost_plan(plan);
    let dynamic = costs.iter().map(|c| c.static_macs() as f64).collect();
    build_report(name, &costs, dynamic, 0)
}

/// Dynamic cost from per-example live counts: `active[head][example]`.
pub fn dynamic_flops_from_counts(name: &str, plan: &ModelPlan, active: &[Vec<usize>]) -> Result<FlopsReport> {
    if active.len() != plan.heads.len() {
        return Err(Error::Contract(format!("{} count vectors for {} heads", active.len(), plan.heads.len())));
    }
    let examples = active.first().map_or(0, |a| a.len());
    if examples == 0 && !active.is_empty() {
        return Err(Error::Contract("dynamic FLOPs of zero examples".into()));
    }
    let costs = cost_plan(plan);
    let mut dynamic = Vec::with_capacity(costs.len());
    for c in &costs {
        dynamic.push(match c.gate {
            None => c.static_macs() as f64,
            Some(h) => {
                let total: u64 = active[h].iter().map(|&n| c.macs_per_input * n as u64).sum();
                total as f64 / examples as f64
            }
        });
    }
    Ok(build_report(name, &costs, dynamic, examples))
}

/// Live counts per head recomputed from gate values `[N, width]`.
pub fn active_counts<T: Scalar>(gates: &[Tensor<T>]) -> Vec<Vec<usize>> {
    gates
        .iter()
        .map(|g| {
            let w = g.shape()[1];
            g.data().chunks(w).map(|r| r.iter().filter(|&&v| v > T::zero()).count()).collect()
        })
        .collect()
}

/// Dynamic cost measured by running the sparse inference path over `images`.
pub fn dynamic_flops<T: Scalar>(model: &DeepMoe<T>, images: &Tensor<T>) -> Result<FlopsReport> {
    let out = model.infer(images, DEFAULT_INFERENCE_BATCH, GateSource::Learned)?;
    dynamic_flops_from_inference(model, &out)
}

/// Per-head live counts `[head][example]` as executed by the sparse kernels.
pub fn executed_counts<T: Scalar>(model: &DeepMoe<T>, out: &InferenceOutput<T>) -> Result<Vec<Vec<usize>>> {
    let costs = cost_plan(&model.plan);
    let mut per_head: Vec<Option<Vec<usize>>> = vec![None; model.plan.heads.len()];
    for (layer, counts) in &out.activity {
        let head = costs
            .iter()
            .find(|c| &c.name == layer)
            .and_then(|c| c.gate)
            .ok_or_else(|| Error::Contract(format!("sparse activity for unplanned layer {layer}")))?;
        per_head[head] = Some(counts.clone());
    }
    per_head
        .into_iter()
        .enumerate()
        .map(|(h, c)| c.ok_or_else(|| Error::Contract(format!("no sparse activity for head {h}"))))
        .collect()
}

/// Dynamic cost from the counts an inference pass actually executed.
pub fn dynamic_flops_from_inference<T: Scalar>(model: &DeepMoe<T>, out: &InferenceOutput<T>) -> Result<FlopsReport> {
    let active = executed_counts(model, out)?;
    dynamic_flops_from_counts(&model.config.name, &model.plan, &active)
}
