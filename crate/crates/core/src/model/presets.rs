//! Shipped model configurations.

use serde::{Deserialize, Serialize};

use super::config::{Backbone, LayerItem, ModelConfig, StageConfig, POOL};
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};

/// Standard 13-conv VGG-16 widths.
pub const VGG16_CHANNELS: [usize; 13] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];

/// Convs followed by a 2x2 max pool (1-based: 2, 4, 7, 10, 13).
pub const VGG16_POOL_AFTER: [usize; 5] = [1, 3, 6, 9, 12];

/// Widening strategies for VGG-16 with their per-conv channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WideningPreset {
    #[serde(rename = "W1-High")]
    W1High,
    #[serde(rename = "W1-Mid")]
    W1Mid,
    #[serde(rename = "W4-Low")]
    W4Low,
    #[serde(rename = "W13-All")]
    W13All,
}

impl WideningPreset {
    pub const ALL: [WideningPreset; 4] =
        [WideningPreset::W1High, WideningPreset::W1Mid, WideningPreset::W4Low, WideningPreset::W13All];

    pub fn name(self) -> &'static str {
        match self {
            WideningPreset::W1High => "W1-High",
            WideningPreset::W1Mid => "W1-Mid",
            WideningPreset::W4Low => "W4-Low",
            WideningPreset::W13All => "W13-All",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown widening preset {s}")))
    }

    pub fn channels(self) -> [usize; 13] {
        match self {
            WideningPreset::W1High => [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 1536, 512, 512],
            WideningPreset::W1Mid => [64, 64, 128, 128, 2990, 256, 256, 512, 512, 512, 512, 512, 512],
            WideningPreset::W4Low => [512, 512, 615, 615, 256, 256, 256, 512, 512, 512, 512, 512, 512],
            WideningPreset::W13All => [128, 128, 256, 256, 405, 405, 405, 615, 615, 615, 615, 615, 615],
        }
    }

    /// Convs that are widened, and therefore turned into mixture-of-experts layers.
    pub fn widened(self) -> [bool; 13] {
        let ch = self.channels();
        let mut out = [false; 13];
        for i in 0..13 {
            out[i] = ch[i] != VGG16_CHANNELS[i] || self == WideningPreset::W13All;
        }
        out
    }
}

/// VGG-style layer list with pools after the given conv indices.
pub fn vgg_layers(channels: &[usize], pool_after: &[usize]) -> Vec<LayerItem> {
    let mut out = Vec::new();
    for (i, &c) in channels.iter().enumerate() {
        out.push(LayerItem::Conv(c));
        if pool_after.contains(&i) {
            out.push(POOL);
        }
    }
    out
}

pub fn vgg16(num_classes: usize) -> ModelConfig {
    ModelConfig {
        name: "vgg16".into(),
        backbone: Backbone::VggStyle,
        in_channels: 3,
        image_size: 32,
        num_classes,
        layers: vgg_layers(&VGG16_CHANNELS, &VGG16_POOL_AFTER),
        stem_channels: 0,
        stages: Vec::new(),
        widen: Vec::new(),
        gated: Vec::new(),
        batch_norm: true,
        gate_bias: false,
        gate_block_input: true,
        embedding: EmbeddingConfig::cifar(num_classes),
    }
}

/// VGG-16 with a widening preset's explicit channel counts; only the widened
/// convs carry gate heads.
pub fn vgg16_widened(preset: WideningPreset, num_classes: usize) -> ModelConfig {
    ModelConfig {
        name: format!("vgg16-{}", preset.name().to_ascii_lowercase()),
        layers: vgg_layers(&preset.channels(), &VGG16_POOL_AFTER),
        gated: preset.widened().to_vec(),
        ..vgg16(num_classes)
    }
}

/// Unwidened VGG-16 with every width divided (ceil) by `divisor`, without
/// gate heads, for desk-scale baselines.
pub fn vgg16_scaled(num_classes: usize, divisor: usize) -> ModelConfig {
    let ch: Vec<usize> = VGG16_CHANNELS.iter().map(|c| c.div_ceil(divisor)).collect();
    ModelConfig {
        name: format!("vgg16-div{divisor}"),
        layers: vgg_layers(&ch, &VGG16_POOL_AFTER),
        gated: vec![false],
        embedding: toy_embedding(num_classes),
        ..vgg16(num_classes)
    }
}

/// Same layout as [`vgg16_widened`] with every width divided (ceil) by `divisor`,
/// for desk-scale training.
pub fn vgg16_widened_scaled(preset: WideningPreset, num_classes: usize, divisor: usize) -> ModelConfig {
    let mut cfg = vgg16_widened(preset, num_classes);
    let ch: Vec<usize> = preset.channels().iter().map(|c| c.div_ceil(divisor)).collect();
    cfg.layers = vgg_layers(&ch, &VGG16_POOL_AFTER);
    cfg.embedding = toy_embedding(num_classes);
    cfg.name = format!("{}-div{divisor}", cfg.name);
    cfg
}

/// CIFAR ResNet-(6n+2) with basic blocks at widths 16/32/64.
pub fn cifar_resnet(n: usize, num_classes: usize) -> ModelConfig {
    ModelConfig {
        name: format!("resnet{}", 6 * n + 2),
        backbone: Backbone::ResnetBasic,
        in_channels: 3,
        image_size: 32,
        num_classes,
        layers: Vec::new(),
        stem_channels: 16,
        stages: vec![
            StageConfig { channels: 16, mid: None, blocks: n, stride: 1 },
            StageConfig { channels: 32, mid: None, blocks: n, stride: 2 },
            StageConfig { channels: 64, mid: None, blocks: n, stride: 2 },
        ],
        widen: Vec::new(),
        gated: Vec::new(),
        batch_norm: true,
        gate_bias: false,
        gate_block_input: true,
        embedding: EmbeddingConfig::cifar(num_classes),
    }
}

/// Small CIFAR-shaped bottleneck-B ResNet (internal widths widened by `factor`).
pub fn cifar_bottleneck_b(num_classes: usize, factor: f64) -> ModelConfig {
    ModelConfig {
        name: format!("resnet-bottleneck-b-x{factor}"),
        backbone: Backbone::ResnetBottleneckB,
        stem_channels: 64,
        stages: vec![
            StageConfig { channels: 256, mid: Some(64), blocks: 2, stride: 1 },
            StageConfig { channels: 512, mid: Some(128), blocks: 2, stride: 2 },
            StageConfig { channels: 1024, mid: Some(256), blocks: 2, stride: 2 },
        ],
        widen: vec![factor],
        ..cifar_resnet(1, num_classes)
    }
}

fn toy_embedding(num_classes: usize) -> EmbeddingConfig {
    EmbeddingConfig { channels: vec![8, 16, 16, 16], embed_dim: 16, num_classes, softmax_output: false }
}

/// Desk-scale VGG-style net on 16x16 inputs: 5 gated convs, at most 32 channels.
pub fn toy_vgg(num_classes: usize) -> ModelConfig {
    ModelConfig {
        name: "toy-vgg".into(),
        backbone: Backbone::VggStyle,
        in_channels: 3,
        image_size: 16,
        num_classes,
        layers: vgg_layers(&[16, 16, 32, 32, 32], &[1, 3, 4]),
        stem_channels: 0,
        stages: Vec::new(),
        widen: Vec::new(),
        gated: Vec::new(),
        batch_norm: true,
        gate_bias: false,
        gate_block_input: true,
        embedding: toy_embedding(num_classes),
    }
}

/// Smallest shipped net: two gated convs on 16x16 inputs.
pub fn tiny_vgg(num_classes: usize) -> ModelConfig {
    ModelConfig {
        name: "tiny-vgg".into(),
        layers: vgg_layers(&[8, 16], &[0, 1]),
        embedding: EmbeddingConfig { channels: vec![4, 8, 8, 8], embed_dim: 8, num_classes, softmax_output: false },
        ..toy_vgg(num_classes)
    }
}

/// Desk-scale basic-block ResNet on 16x16 inputs (even internal widths).
pub fn toy_resnet(num_classes: usize) -> ModelConfig {
    ModelConfig {
        name: "toy-resnet".into(),
        backbone: Backbone::ResnetBasic,
        in_channels: 3,
        image_size: 16,
        num_classes,
        layers: Vec::new(),
        stem_channels: 8,
        stages: vec![
            StageConfig { channels: 8, mid: None, blocks: 1, stride: 1 },
            StageConfig { channels: 16, mid: None, blocks: 1, stride: 2 },
        ],
        widen: Vec::new(),
        gated: Vec::new(),
        batch_norm: true,
        gate_bias: false,
        gate_block_input: true,
        embedding: toy_embedding(num_classes),
    }
}

/// Three gated convs on 8x8 inputs with a 3-layer embedding; sized for
/// finite-difference gradient checks.
pub fn gradcheck_toy(num_classes: usize) -> ModelConfig {
    ModelConfig {
        name: "gradcheck-toy".into(),
        image_size: 8,
        layers: vgg_layers(&[4, 4, 5], &[1]),
        embedding: EmbeddingConfig { channels: vec![3, 4, 4], embed_dim: 4, num_classes, softmax_output: false },
        ..toy_vgg(num_classes)
    }
}

/// Full-size CIFAR-scale presets (32x32 inputs).
pub fn cifar_presets(num_classes: usize) -> Vec<ModelConfig> {
    let mut out = vec![vgg16(num_classes)];
    out.extend(WideningPreset::ALL.iter().map(|&p| vgg16_widened(p, num_classes)));
    out.push(cifar_resnet(9, num_classes));
    out.push(cifar_resnet(9, num_classes).widened(2.0));
    out.push(cifar_bottleneck_b(num_classes, 2.0));
    out
}

pub fn toy_presets(num_classes: usize) -> Vec<ModelConfig> {
    vec![toy_vgg(num_classes), tiny_vgg(num_classes), toy_resnet(num_classes), gradcheck_toy(num_classes)]
}

/// Every shipped preset, by name.
pub fn shipped_presets(num_classes: usize) -> Vec<ModelConfig> {
    let mut out = cifar_presets(num_classes);
    out.extend(toy_presets(num_classes));
    out
}

pub fn preset(name: &str, num_classes: usize) -> Result<ModelConfig> {
    shipped_presets(num_classes)
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| {
            let names: Vec<String> = shipped_presets(num_classes).into_iter().map(|c| c.name).collect();
            Error::Config(format!("unknown preset {name}; available: {}", names.join(", ")))
        })
}
