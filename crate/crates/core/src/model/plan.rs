//! Shape-resolved execution plan compiled from a [`ModelConfig`]. The same plan
//! drives parameter construction, the forward pass and FLOPs accounting.

use super::config::{scale_width, Backbone, LayerItem, ModelConfig};
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::graph::conv_output_hw;
use crate::moe::GateHead;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_in: usize,
    pub w_in: usize,
    /// Head whose gates scale this conv's input channels.
    pub input_gate: Option<usize>,
    pub bias: bool,
    pub batch_norm: bool,
}

impl ConvLayer {
    pub fn out_hw(&self) -> (usize, usize) {
        conv_output_hw(self.h_in, self.w_in, self.k, self.stride, self.pad)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.k * self.k * self.c_in * self.c_out;
        if self.bias {
            n += self.c_out;
        }
        if self.batch_norm {
            n += 2 * self.c_out;
        }
        n
    }

    /// Multiply-accumulates with `active_in` live input channels.
    pub fn macs(&self, active_in: usize) -> u64 {
        let (ho, wo) = self.out_hw();
        (self.k * self.k * active_in * self.c_out * ho * wo) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub input_gate: Option<usize>,
}

impl LinearLayer {
    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    BottleneckA,
    BottleneckB,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub name: String,
    pub kind: BlockKind,
    pub convs: Vec<ConvLayer>,
    pub shortcut: Option<ConvLayer>,
}

impl BlockPlan {
    pub fn c_in(&self) -> usize {
        self.convs[0].c_in
    }

    pub fn c_out(&self) -> usize {
        self.convs.last().unwrap().c_out
    }

    pub fn gate_heads(&self) -> Vec<usize> {
        self.convs.iter().filter_map(|c| c.input_gate).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlanItem {
    Conv(ConvLayer),
    Pool,
    Block(BlockPlan),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelPlan {
    pub items: Vec<PlanItem>,
    pub classifier: LinearLayer,
    pub heads: Vec<GateHead>,
    pub embedding: EmbeddingConfig,
    pub in_channels: usize,
    pub image_size: usize,
}

impl ModelPlan {
    /// Every base-network conv in execution order, including block shortcuts.
    pub fn convs(&self) -> Vec<&ConvLayer> {
        let mut out = Vec::new();
        for item in &self.items {
            match item {
                PlanItem::Conv(c) => out.push(c),
                PlanItem::Pool => {}
                PlanItem::Block(b) => {
                    out.extend(b.convs.iter());
                    out.extend(b.shortcut.iter());
                }
            }
        }
        out
    }

    /// Trainable scalars of the base network (convs, batch norm affine, classifier).
    pub fn base_param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum::<usize>() + self.classifier.param_count()
    }

    pub fn gate_param_count(&self) -> usize {
        self.heads.iter().map(|h| h.param_count()).sum()
    }

    pub fn embedding_param_count(&self) -> usize {
        self.embedding.param_count(self.in_channels)
    }

    pub fn total_param_count(&self) -> usize {
        self.base_param_count() + self.gate_param_count() + self.embedding_param_count()
    }
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    heads: Vec<GateHead>,
}

impl Builder<'_> {
    fn head(&mut self, width: usize) -> usize {
        let layer = self.heads.len();
        self.heads.push(GateHead {
            name: format!("gate.{layer}"),
            layer,
            embed_dim: self.cfg.embedding.embed_dim,
            width,
            bias: self.cfg.gate_bias,
        });
        layer
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&self, name: String, c_in: usize, c_out: usize, k: usize, stride: usize, hw: (usize, usize)) -> ConvLayer {
        ConvLayer {
            name,
            c_in,
            c_out,
            k,
            stride,
            pad: k / 2,
            h_in: hw.0,
            w_in: hw.1,
            input_gate: None,
            bias: !self.cfg.batch_norm,
            batch_norm: self.cfg.batch_norm,
        }
    }
}

pub fn compile(cfg: &ModelConfig) -> Result<ModelPlan> {
    cfg.validate()?;
    let mut b = Builder { cfg, heads: Vec::new() };
    let widen = cfg.widen_factors()?;
    let gated = cfg.gated_flags()?;
    let mut items = Vec::new();
    let mut hw = (cfg.image_size, cfg.image_size);
    let mut c = cfg.in_channels;
    let classifier_gate;
    match cfg.backbone {
        Backbone::VggStyle => {
            let mut pending_gate: Option<usize> = None;
            let mut idx = 0;
            for item in &cfg.layers {
                match item {
                    LayerItem::Conv(width) => {
                        let c_out = scale_width(*width, widen[idx]);
                        let mut conv = b.conv(format!("base.conv{idx}"), c, c_out, 3, 1, hw);
                        conv.input_gate = pending_gate.take();
                        if gated[idx] {
                            pending_gate = Some(b.head(c_out));
                        }
                        c = c_out;
                        items.push(PlanItem::Conv(conv));
                        idx += 1;
                    }
                    LayerItem::Pool(_) => {
                        if hw.0 < 2 || hw.1 < 2 {
                            return Err(Error::Config(format!("{}: pooling below 1x1", cfg.name)));
                        }
                        hw = (hw.0 / 2, hw.1 / 2);
                        items.push(PlanItem::Pool);
                    }
                }
            }
            classifier_gate = pending_gate;
        }
        backbone => {
            let stem = b.conv("base.stem".into(), c, cfg.stem_channels, 3, 1, hw);
            c = cfg.stem_channels;
            items.push(PlanItem::Conv(stem));
            let mut block_idx = 0;
            for (si, stage) in cfg.stages.iter().enumerate() {
                for bi in 0..stage.blocks {
                    let stride = if bi == 0 { stage.stride } else { 1 };
                    let name = format!("base.s{si}.b{bi}");
                    let out = stage.channels;
                    let gate_this = gated[block_idx];
                    let (kind, convs) = match backbone {
                        Backbone::ResnetBasic => {
                            let mid = scale_width(stage.mid.unwrap_or(out), widen[si]);
                            let mut c1 = b.conv(format!("{name}.conv1"), c, mid, 3, stride, hw);
                            let hw2 = c1.out_hw();
                            let mut c2 = b.conv(format!("{name}.conv2"), mid, out, 3, 1, hw2);
                            if gate_this {
                                if cfg.gate_block_input {
                                    c1.input_gate = Some(b.head(c));
                                }
                                c2.input_gate = Some(b.head(mid));
                            }
                            (BlockKind::Basic, vec![c1, c2])
                        }
                        _ => {
                            let mid = scale_width(stage.mid.unwrap_or((out / 4).max(1)), widen[si]);
                            let c1 = b.conv(format!("{name}.conv1"), c, mid, 1, 1, hw);
                            let mut c2 = b.conv(format!("{name}.conv2"), mid, mid, 3, stride, hw);
                            let hw2 = c2.out_hw();
                            let mut c3 = b.conv(format!("{name}.conv3"), mid, out, 1, 1, hw2);
                            let kind = if backbone == Backbone::ResnetBottleneckA {
                                BlockKind::BottleneckA
                            } else {
                                BlockKind::BottleneckB
                            };
                            if gate_this {
                                c2.input_gate = Some(b.head(mid));
                                if kind == BlockKind::BottleneckA {
                                    c3.input_gate = Some(b.head(mid));
                                }
                            }
                            (kind, vec![c1, c2, c3])
                        }
                    };
                    let shortcut = (stride != 1 || c != out)
                        .then(|| b.conv(format!("{name}.shortcut"), c, out, 1, stride, hw));
                    hw = convs.last().unwrap().out_hw();
                    c = out;
                    items.push(PlanItem::Block(BlockPlan { name, kind, convs, shortcut }));
                    block_idx += 1;
                }
            }
            classifier_gate = None;
        }
    }
    let classifier = LinearLayer { name: "base.fc".into(), d_in: c, d_out: cfg.num_classes, input_gate: classifier_gate };
    Ok(ModelPlan {
        items,
        classifier,
        heads: b.heads,
        embedding: cfg.embedding.clone(),
        in_channels: cfg.in_channels,
        image_size: cfg.image_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    #[test]
    fn vgg_heads_cover_every_conv_output() {
        let plan = compile(&presets::toy_vgg(4)).unwrap();
        assert_eq!(plan.heads.len(), 5);
        let convs = plan.convs();
        assert_eq!(convs[0].input_gate, None);
        for (i, c) in convs.iter().enumerate().skip(1) {
            let h = c.input_gate.unwrap();
            assert_eq!(h, i - 1);
            assert_eq!(plan.heads[h].width, c.c_in);
        }
        assert_eq!(plan.classifier.input_gate, Some(4));
        assert_eq!(plan.heads[4].width, plan.classifier.d_in);
    }

    #[test]
    fn w13_all_gates_all_13() {
        let plan = compile(&presets::vgg16_widened(presets::WideningPreset::W13All, 100)).unwrap();
        assert_eq!(plan.heads.len(), 13);
        let plan = compile(&presets::vgg16_widened(presets::WideningPreset::W1Mid, 100)).unwrap();
        assert_eq!(plan.heads.len(), 1);
        assert_eq!(plan.heads[0].width, 2990);
    }

    #[test]
    fn widening_doubles_vgg_convs() {
        let base = compile(&presets::toy_vgg(4)).unwrap();
        let wide = compile(&presets::toy_vgg(4).widened(2.0)).unwrap();
        for (a, b) in base.convs().iter().zip(wide.convs()) {
            assert_eq!(b.c_out, 2 * a.c_out);
        }
    }

    #[test]
    fn bottleneck_b_has_fewer_heads_than_a() {
        let mut a = presets::cifar_bottleneck_b(10, 1.0);
        a.backbone = Backbone::ResnetBottleneckA;
        let pa = compile(&a).unwrap();
        let pb = compile(&presets::cifar_bottleneck_b(10, 1.0)).unwrap();
        assert_eq!(pa.heads.len(), 2 * pb.heads.len());
        assert!(pb.gate_param_count() < pa.gate_param_count());
    }

    #[test]
    fn resnet_widening_keeps_block_io() {
        let base = compile(&presets::toy_resnet(4)).unwrap();
        let wide = compile(&presets::toy_resnet(4).widened(2.0)).unwrap();
        for (a, b) in base.items.iter().zip(&wide.items) {
            if let (PlanItem::Block(a), PlanItem::Block(b)) = (a, b) {
                assert_eq!(a.c_in(), b.c_in());
                assert_eq!(a.c_out(), b.c_out());
                assert_eq!(b.convs[0].c_out, 2 * a.convs[0].c_out);
            }
        }
    }
}
