//! The shallow embedding network: stride-2 3x3 convolutions with ReLU, global
//! average pooling and a linear projection to the latent mixture weights `e`,
//! plus the auxiliary linear classifier trained on `e`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{kaiming_init, normal_init, ParamGroup, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Output channels of each stride-2 conv; its length is the depth.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Pass `e` through a softmax before the gate heads. Off by default: the
    /// heads consume the raw projection.
    #[serde(default)]
    pub softmax_output: bool,
}

impl EmbeddingConfig {
    /// Four layers `[32, 64, 128, 128]`, 64-dimensional embedding.
    pub fn cifar(num_classes: usize) -> Self {
        Self { channels: vec![32, 64, 128, 128], embed_dim: 64, num_classes, softmax_output: false }
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("embedding needs at least one layer".into()));
        }
        if self.channels.contains(&0) || self.embed_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("embedding widths and class count must be positive".into()));
        }
        Ok(())
    }

    /// Spatial sizes after each stride-2 layer for an `h x w` image.
    pub fn spatial_trace(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.channels.len());
        let (mut h, mut w) = (h, w);
        for _ in &self.channels {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
            dims.push((h, w));
        }
        dims
    }

    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let min = 1usize << self.num_layers();
        if h < min || w < min {
            return shape_err(format!(
                "{h}x{w} image too small for a {}-layer stride-2 embedding (needs >= {min})",
                self.num_layers()
            ));
        }
        Ok(())
    }

    /// Trainable scalars: `Σ (9·C_in·C_out + C_out)` + projection + auxiliary head.
    pub fn param_count(&self, in_channels: usize) -> usize {
        let mut c_in = in_channels;
        let mut n = 0;
        for &c in &self.channels {
            n += 9 * c_in * c + c;
            c_in = c;
        }
        n + c_in * self.embed_dim + self.embed_dim + self.embed_dim * self.num_classes + self.num_classes
    }
}

pub const PREFIX: &str = "embed";

fn conv_name(i: usize) -> String {
    format!("{PREFIX}.conv{i}")
}

/// Add embedding-network parameters to `params`, initialized from `seed`.
pub fn build_embedding_net<T: Scalar>(
    cfg: &EmbeddingConfig,
    in_channels: usize,
    seed: u64,
    params: &mut ParamSet<T>,
) -> Result<()> {
    cfg.validate()?;
    let mut c_in = in_channels;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let w = format!("{}.weight", conv_name(i));
        params.insert(&w, kaiming_init(&[c_in, 3, 3, c], 9 * c_in, seed, &w), ParamGroup::Embedding, true);
        params.insert(&format!("{}.bias", conv_name(i)), Tensor::zeros(&[c]), ParamGroup::Embedding, true);
        c_in = c;
    }
    let w = format!("{PREFIX}.proj.weight");
    params.insert(&w, kaiming_init(&[c_in, cfg.embed_dim], c_in, seed, &w), ParamGroup::Embedding, true);
    params.insert(&format!("{PREFIX}.proj.bias"), Tensor::zeros(&[cfg.embed_dim]), ParamGroup::Embedding, true);
    let w = format!("{PREFIX}.aux.weight");
    let std = (1.0 / cfg.embed_dim as f64).sqrt();
    params.insert(&w, normal_init(&[cfg.embed_dim, cfg.num_classes], std, seed, &w), ParamGroup::Embedding, true);
    params.insert(&format!("{PREFIX}.aux.bias"), Tensor::zeros(&[cfg.num_classes]), ParamGroup::Embedding, true);
    Ok(())
}

/// Image batch `[B, C, H, W]` to latent mixture weights `[B, embed_dim]`.
pub fn embed_forward<T: Scalar>(
    graph: &mut Graph<T>,
    cfg: &EmbeddingConfig,
    params: &ParamSet<T>,
    image: Var,
) -> Result<Var> {
    let s = graph.shape(image).to_vec();
    if s.len() != 4 {
        return shape_err(format!("embedding input must be [B,C,H,W], got {s:?}"));
    }
    cfg.check_image(s[2], s[3])?;
    let mut h = image;
    for i in 0..cfg.num_layers() {
        let w = graph.param(params, &format!("{}.weight", conv_name(i)))?;
        let b = graph.param(params, &format!("{}.bias", conv_name(i)))?;
        h = graph.conv2d(h, w, 2, 1)?;
        h = graph.add_channel_bias(h, b)?;
        h = graph.relu(h);
    }
    let pooled = graph.global_avg_pool(h)?;
    let w = graph.param(params, &format!("{PREFIX}.proj.weight"))?;
    let b = graph.param(params, &format!("{PREFIX}.proj.bias"))?;
    let e = graph.linear(pooled, w, Some(b))?;
    if cfg.softmax_output {
        graph.softmax(e)
    } else {
        Ok(e)
    }
}

/// Auxiliary classifier logits `[B, num_classes]` from embeddings.
pub fn aux_classify<T: Scalar>(graph: &mut Graph<T>, params: &ParamSet<T>, e: Var) -> Result<Var> {
    let w = graph.param(params, &format!("{PREFIX}.aux.weight"))?;
    let b = graph.param(params, &format!("{PREFIX}.aux.bias"))?;
    graph.linear(e, w, Some(b))
}
