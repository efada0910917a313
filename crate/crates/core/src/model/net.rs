use super::config::ModelConfig;
use super::plan::{compile, BlockKind, BlockPlan, ConvLayer, ModelPlan, PlanItem};
use crate::embedding::{aux_classify, build_embedding_net, embed_forward};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var, BN_MOMENTUM};
use crate::moe::{gate_forward, gated_conv, gated_features};
use crate::params::{kaiming_init, normal_init, ParamGroup, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where the per-layer gates come from in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum GateSource<'a, T> {
    /// Heads applied to the image's own embedding.
    Learned,
    /// Heads applied to substitute embeddings `[B, embed_dim]`.
    Donor(&'a Tensor<T>),
    /// Every gate set to this value.
    Constant(T),
    /// Explicit `[B, width]` gates, one tensor per head.
    Explicit(&'a [Tensor<T>]),
}

#[derive(Clone, Copy, Debug)]
pub enum NormMode {
    /// Normalize with batch statistics and report them for the running averages.
    Batch,
    /// Use running statistics; examples are independent.
    Running,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a, T> {
    pub gates: GateSource<'a, T>,
    pub norm: NormMode,
}

impl<T> ForwardOptions<'_, T> {
    pub fn train() -> Self {
        Self { gates: GateSource::Learned, norm: NormMode::Batch }
    }

    pub fn eval() -> Self {
        Self { gates: GateSource::Learned, norm: NormMode::Running }
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    pub aux_logits: Var,
    pub embedding: Var,
    /// `[B, width]` per gate head, exactly the values consumed by the convs.
    pub gates: Vec<Var>,
}

/// A DeepMoE network: base conv net, shallow embedding net and gate heads.
#[derive(Clone, Debug)]
pub struct DeepMoe<T> {
    pub config: ModelConfig,
    pub plan: ModelPlan,
    pub params: ParamSet<T>,
}

fn bn_names(conv: &str) -> [String; 4] {
    ["gamma", "beta", "mean", "var"].map(|s| format!("{conv}.bn.{s}"))
}

fn init_conv<T: Scalar>(params: &mut ParamSet<T>, conv: &ConvLayer, seed: u64) {
    let w = conv.weight_name();
    let fan_in = conv.k * conv.k * conv.c_in;
    params.insert(&w, kaiming_init(&[conv.c_in, conv.k, conv.k, conv.c_out], fan_in, seed, &w), ParamGroup::Base, true);
    if conv.bias {
        params.insert(&format!("{}.bias", conv.name), Tensor::zeros(&[conv.c_out]), ParamGroup::Base, true);
    }
    if conv.batch_norm {
        let [g, b, m, v] = bn_names(&conv.name);
        params.insert(&g, Tensor::full(&[conv.c_out], T::one()), ParamGroup::Base, true);
        params.insert(&b, Tensor::zeros(&[conv.c_out]), ParamGroup::Base, true);
        params.insert(&m, Tensor::zeros(&[conv.c_out]), ParamGroup::Base, false);
        params.insert(&v, Tensor::full(&[conv.c_out], T::one()), ParamGroup::Base, false);
    }
}

/// Build a model with parameters seeded per name from `seed`: base-network
/// tensors do not depend on whether gate heads exist.
pub fn build_deepmoe<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<DeepMoe<T>> {
    let plan = compile(cfg)?;
    let mut params = ParamSet::default();
    for conv in plan.convs() {
        init_conv(&mut params, conv, seed);
    }
    let fc = &plan.classifier;
    let w = format!("{}.weight", fc.name);
    let std = (1.0 / fc.d_in as f64).sqrt();
    params.insert(&w, normal_init(&[fc.d_in, fc.d_out], std, seed, &w), ParamGroup::Base, true);
    params.insert(&format!("{}.bias", fc.name), Tensor::zeros(&[fc.d_out]), ParamGroup::Base, true);
    build_embedding_net(&plan.embedding, plan.in_channels, seed, &mut params)?;
    for head in &plan.heads {
        head.init(&mut params, seed);
    }
    Ok(DeepMoe { config: cfg.clone(), plan, params })
}

impl<T: Scalar> DeepMoe<T> {
    pub fn cast<S: Scalar>(&self) -> DeepMoe<S> {
        DeepMoe { config: self.config.clone(), plan: self.plan.clone(), params: self.params.cast() }
    }

    pub fn num_heads(&self) -> usize {
        self.plan.heads.len()
    }

    /// Run the full network on `images: [B, C, H, W]`.
    pub fn forward(&self, graph: &mut Graph<T>, images: Var, opts: ForwardOptions<'_, T>) -> Result<ForwardOutput> {
        let s = graph.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.plan.in_channels || s[2] != self.plan.image_size || s[3] != self.plan.image_size {
            return shape_err(format!(
                "model expects [B,{},{},{}] images, got {s:?}",
                self.plan.in_channels, self.plan.image_size, self.plan.image_size
            ));
        }
        let batch = s[0];
        let embedding = embed_forward(graph, &self.plan.embedding, &self.params, images)?;
        let aux_logits = aux_classify(graph, &self.params, embedding)?;
        let gates = self.gates(graph, embedding, batch, opts.gates)?;
        let mut h = images;
        for item in &self.plan.items {
            h = match item {
                PlanItem::Conv(conv) => {
                    let z = self.conv_unit(graph, conv, h, &gates, opts.norm)?;
                    graph.relu(z)
                }
                PlanItem::Pool => graph.max_pool2(h)?,
                PlanItem::Block(block) => self.block(graph, block, h, &gates, opts.norm)?,
            };
        }
        let mut pooled = graph.global_avg_pool(h)?;
        let fc = &self.plan.classifier;
        if let Some(head) = fc.input_gate {
            pooled = gated_features(graph, pooled, gates[head], &fc.name)?;
        }
        let w = graph.param(&self.params, &format!("{}.weight", fc.name))?;
        let b = graph.param(&self.params, &format!("{}.bias", fc.name))?;
        let logits = graph.linear(pooled, w, Some(b))?;
        Ok(ForwardOutput { logits, aux_logits, embedding, gates })
    }

    fn gates(&self, graph: &mut Graph<T>, e: Var, batch: usize, source: GateSource<'_, T>) -> Result<Vec<Var>> {
        let heads = &self.plan.heads;
        match source {
            GateSource::Learned => heads.iter().map(|h| gate_forward(graph, &self.params, h, e)).collect(),
            GateSource::Donor(donor) => {
                if donor.shape() != graph.shape(e) {
                    return shape_err(format!("donor embeddings {:?} vs {:?}", donor.shape(), graph.shape(e)));
                }
                let d = graph.constant(donor.clone());
                heads.iter().map(|h| gate_forward(graph, &self.params, h, d)).collect()
            }
            GateSource::Constant(v) => {
                Ok(heads.iter().map(|h| graph.constant(Tensor::full(&[batch, h.width], v))).collect())
            }
            GateSource::Explicit(list) => {
                if list.len() != heads.len() {
                    return Err(Error::Contract(format!("{} gate tensors for {} heads", list.len(), heads.len())));
                }
                heads
                    .iter()
                    .zip(list)
                    .map(|(h, t)| {
                        if t.shape() != [batch, h.width] {
                            return shape_err(format!("gates for {} must be [{batch},{}]", h.name, h.width));
                        }
                        Ok(graph.constant(t.clone()))
                    })
                    .collect()
            }
        }
    }

    /// Conv (gated when the plan says so), bias, batch norm; no activation.
    fn conv_unit(&self, graph: &mut Graph<T>, conv: &ConvLayer, x: Var, gates: &[Var], norm: NormMode) -> Result<Var> {
        let k = graph.param(&self.params, &conv.weight_name())?;
        let mut z = match conv.input_gate {
            Some(head) => gated_conv(graph, x, k, gates[head], conv.stride, conv.pad, &conv.name)?,
            None => graph.conv2d(x, k, conv.stride, conv.pad)?,
        };
        if conv.bias {
            let b = graph.param(&self.params, &format!("{}.bias", conv.name))?;
            z = graph.add_channel_bias(z, b)?;
        }
        if conv.batch_norm {
            let [gn, bn, mn, vn] = bn_names(&conv.name);
            let gamma = graph.param(&self.params, &gn)?;
            let beta = graph.param(&self.params, &bn)?;
            let running = match norm {
                NormMode::Batch => None,
                NormMode::Running => Some((self.params.get(&mn).unwrap(), self.params.get(&vn).unwrap())),
            };
            z = graph.batch_norm(z, gamma, beta, running, &conv.name)?;
        }
        Ok(z)
    }

    /// Residual block: every conv followed by ReLU, then the shortcut added.
    fn block(&self, graph: &mut Graph<T>, block: &BlockPlan, x: Var, gates: &[Var], norm: NormMode) -> Result<Var> {
        let mut h = x;
        for conv in &block.convs {
            let z = self.conv_unit(graph, conv, h, gates, norm)?;
            h = graph.relu(z);
        }
        let skip = match &block.shortcut {
            Some(conv) => self.conv_unit(graph, conv, x, gates, norm)?,
            None => x,
        };
        if graph.shape(skip) != graph.shape(h) {
            return shape_err(format!(
                "{}: residual {:?} vs branch {:?}",
                block.name,
                graph.shape(skip),
                graph.shape(h)
            ));
        }
        graph.add(h, skip)
    }

    /// Fold batch statistics recorded on `graph` into the running estimates.
    pub fn update_running_stats(&mut self, graph: &Graph<T>) {
        let m = T::lit(BN_MOMENTUM);
        for obs in graph.batch_norm_observations() {
            let [_, _, mn, vn] = bn_names(&obs.name);
            if let Some(mean) = self.params.get_mut(&mn) {
                for (r, &b) in mean.data_mut().iter_mut().zip(&obs.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
            if let Some(var) = self.params.get_mut(&vn) {
                for (r, &b) in var.data_mut().iter_mut().zip(&obs.var_unbiased) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    pub fn block_plan(&self, name: &str) -> Option<&BlockPlan> {
        self.plan.items.iter().find_map(|i| match i {
            PlanItem::Block(b) if b.name == name => Some(b),
            _ => None,
        })
    }
}

/// A residual block run in isolation with explicit gates per block head,
/// `gates[j]` matching the `j`-th gated conv of the block.
fn block_standalone<T: Scalar>(
    model: &DeepMoe<T>,
    graph: &mut Graph<T>,
    block: &BlockPlan,
    x: Var,
    gates: &[Var],
    norm: NormMode,
) -> Result<Var> {
    let ids = block.gate_heads();
    if ids.len() != gates.len() {
        return shape_err(format!("{} expects {} gate tensors, got {}", block.name, ids.len(), gates.len()));
    }
    let mut table = vec![gates.first().copied().unwrap_or(x); model.plan.heads.len()];
    for (&id, &g) in ids.iter().zip(gates) {
        table[id] = g;
    }
    model.block(graph, block, x, &table, norm)
}

/// Basic block `relu(conv2(g2 ⊙ relu(conv1(g1 ⊙ x)))) + shortcut(x)`.
pub fn gated_basic_block_forward<T: Scalar>(
    model: &DeepMoe<T>,
    graph: &mut Graph<T>,
    block: &BlockPlan,
    x: Var,
    gates: &[Var],
    norm: NormMode,
) -> Result<Var> {
    if block.kind != BlockKind::Basic {
        return Err(Error::Contract(format!("{} is not a basic block", block.name)));
    }
    block_standalone(model, graph, block, x, gates, norm)
}

/// Bottleneck 1x1 -> 3x3 -> 1x1; variant A gates both inner interfaces, B only the 3x3 input.
pub fn gated_bottleneck_forward<T: Scalar>(
    model: &DeepMoe<T>,
    graph: &mut Graph<T>,
    block: &BlockPlan,
    x: Var,
    gates: &[Var],
    norm: NormMode,
) -> Result<Var> {
    if block.kind == BlockKind::Basic {
        return Err(Error::Contract(format!("{} is not a bottleneck block", block.name)));
    }
    block_standalone(model, graph, block, x, gates, norm)
}
