use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    VggStyle,
    ResnetBasic,
    ResnetBottleneckA,
    ResnetBottleneckB,
}

impl Backbone {
    pub fn is_resnet(self) -> bool {
        !matches!(self, Backbone::VggStyle)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMarker {
    Pool,
}

/// One entry of a VGG-style layer list: a 3x3 conv with that many output
/// channels, or a 2x2 max pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerItem {
    Conv(usize),
    Pool(PoolMarker),
}

pub const POOL: LayerItem = LayerItem::Pool(PoolMarker::Pool);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Block output channels.
    pub channels: usize,
    /// Internal width before widening; defaults to `channels` (basic) or
    /// `channels / 4` (bottleneck).
    #[serde(default)]
    pub mid: Option<usize>,
    pub blocks: usize,
    pub stride: usize,
}

/// Declarative network description.
///
/// For VGG-style nets `widen` and `gated` are indexed by conv layer, and
/// `gated[i]` places a gate head after conv `i`; it scales the input channels
/// of whatever consumes conv `i`'s output (the next conv, or the classifier).
/// For residual nets they are indexed by stage and by block respectively.
/// An empty list means "all 1.0" / "all gated"; a single entry broadcasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub backbone: Backbone,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub layers: Vec<LayerItem>,
    #[serde(default)]
    pub stem_channels: usize,
    #[serde(default)]
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub widen: Vec<f64>,
    #[serde(default)]
    pub gated: Vec<bool>,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    #[serde(default)]
    pub gate_bias: bool,
    /// Basic blocks only: also gate the block input ahead of the first conv.
    #[serde(default = "default_true")]
    pub gate_block_input: bool,
    pub embedding: EmbeddingConfig,
}

fn default_in_channels() -> usize {
    3
}

fn default_image_size() -> usize {
    32
}

fn default_true() -> bool {
    true
}

/// Scale channel counts by `factor`, rounding half up and never shrinking.
pub fn widen_channels(base: &[usize], factor: f64) -> Vec<usize> {
    assert!(factor >= 1.0, "widen factor must be >= 1");
    base.iter().map(|&c| scale_width(c, factor)).collect()
}

pub(crate) fn scale_width(c: usize, factor: f64) -> usize {
    ((c as f64 * factor + 0.5).floor() as usize).max(c)
}

fn broadcast<T: Copy>(values: &[T], n: usize, default: T, what: &str) -> Result<Vec<T>> {
    match values.len() {
        0 => Ok(vec![default; n]),
        1 => Ok(vec![values[0]; n]),
        l if l == n => Ok(values.to_vec()),
        l => Err(Error::Config(format!("{what} has {l} entries, expected 1 or {n}"))),
    }
}

impl ModelConfig {
    pub fn conv_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerItem::Conv(c) => Some(*c),
                LayerItem::Pool(_) => None,
            })
            .collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Number of units `widen` indexes: convs (VGG) or stages (ResNet).
    pub fn widen_units(&self) -> usize {
        if self.backbone.is_resnet() {
            self.stages.len()
        } else {
            self.conv_channels().len()
        }
    }

    /// Number of units `gated` indexes: convs (VGG) or blocks (ResNet).
    pub fn gate_units(&self) -> usize {
        if self.backbone.is_resnet() {
            self.num_blocks()
        } else {
            self.conv_channels().len()
        }
    }

    pub fn widen_factors(&self) -> Result<Vec<f64>> {
        broadcast(&self.widen, self.widen_units(), 1.0, "widen")
    }

    pub fn gated_flags(&self) -> Result<Vec<bool>> {
        broadcast(&self.gated, self.gate_units(), true, "gated")
    }

    /// Copy with every gate removed.
    pub fn ungated(&self) -> Self {
        Self { gated: vec![false], name: format!("{}-ungated", self.name), ..self.clone() }
    }

    /// Copy with widths multiplied by `factor` everywhere.
    pub fn widened(&self, factor: f64) -> Self {
        let widen = self.widen_factors().unwrap_or_default().iter().map(|w| w * factor).collect();
        Self { widen, name: format!("{}-x{factor}", self.name), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if self.num_classes == 0 || self.in_channels == 0 || self.image_size == 0 {
            return Err(Error::Config("class count, input channels and image size must be positive".into()));
        }
        if self.embedding.num_classes != self.num_classes {
            return Err(Error::Config(format!(
                "embedding classifier has {} classes, model has {}",
                self.embedding.num_classes, self.num_classes
            )));
        }
        let widen = self.widen_factors()?;
        if widen.iter().any(|&w| !(w >= 1.0) || !w.is_finite()) {
            return Err(Error::Config("widen factors must be finite and >= 1".into()));
        }
        self.gated_flags()?;
        match self.backbone {
            Backbone::VggStyle => {
                if self.conv_channels().is_empty() {
                    return Err(Error::Config("VGG-style net needs at least one conv".into()));
                }
                if self.conv_channels().contains(&0) {
                    return Err(Error::Config("conv channel counts must be positive".into()));
                }
            }
            _ => {
                if self.stem_channels == 0 || self.stages.is_empty() {
                    return Err(Error::Config("residual net needs a stem and at least one stage".into()));
                }
                for s in &self.stages {
                    if s.channels == 0 || s.blocks == 0 || s.stride == 0 || s.mid == Some(0) {
                        return Err(Error::Config(format!("invalid stage {s:?}")));
                    }
                }
            }
        }
        self.embedding.check_image(self.image_size, self.image_size)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widen_rounds_half_up() {
        assert_eq!(widen_channels(&[64, 128], 2.0), vec![128, 256]);
        assert_eq!(widen_channels(&[5, 3], 1.5), vec![8, 5]);
        assert_eq!(widen_channels(&[10], 1.0), vec![10]);
    }

    #[test]
    fn layer_list_json_form() {
        let items: Vec<LayerItem> = serde_json::from_str(r#"[8, "pool", 16]"#).unwrap();
        assert_eq!(items, vec![LayerItem::Conv(8), POOL, LayerItem::Conv(16)]);
        assert_eq!(serde_json::to_string(&items).unwrap(), r#"[8,"pool",16]"#);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast::<f64>(&[], 3, 1.0, "w").unwrap(), vec![1.0; 3]);
        assert_eq!(broadcast(&[2.0], 2, 1.0, "w").unwrap(), vec![2.0; 2]);
        assert!(broadcast(&[2.0, 1.0], 3, 1.0, "w").is_err());
    }
}
