#![allow(dead_code)]

use deepmoe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs + rel * a.abs().max(b.abs())
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Max over elements of `|a - b| / max(|a|, |b|, 1)`.
pub fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0)).fold(0.0, f64::max)
}

/// Cross-correlation by six explicit loops per example; kernel `[C_in, k, k, C_out]`.
pub fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [b, c, h, w] = x.shape().try_into().unwrap();
    let [ci, kh, kw, co] = k.shape().try_into().unwrap();
    assert_eq!(ci, c);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, co, ho, wo]);
    for n in 0..b {
        for o in 0..co {
            for s in 0..ho {
                for t in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (s * stride + u) as i64 - pad as i64;
                                let xx = (t * stride + v) as i64 - pad as i64;
                                if y < 0 || xx < 0 || y >= h as i64 || xx >= w as i64 {
                                    continue;
                                }
                                acc += k.data()[((i * kh + u) * kw + v) * co + o]
                                    * x.data()[((n * c + i) * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                    out.data_mut()[((n * co + o) * ho + s) * wo + t] = acc;
                }
            }
        }
    }
    out
}

/// MACs by group (base, embedding, gate heads) read straight off a config,
/// without the compiled plan. 3x3 convs use padding 1; pools halve.
pub fn closed_form_macs(cfg: &deepmoe::ModelConfig) -> (u64, u64, u64) {
    use deepmoe::model::{Backbone, LayerItem};
    let conv = |k: usize, ci: usize, co: usize, hw: usize| (k * k * ci * co * hw * hw) as u64;
    let wid = |c: usize, f: f64| ((c as f64 * f).round() as usize).max(c);
    let d = cfg.embedding.embed_dim;
    let (mut base, mut gate) = (0u64, 0u64);
    let mut hw = cfg.image_size;
    let mut c = cfg.in_channels;
    if cfg.backbone == Backbone::VggStyle {
        let n = cfg.conv_channels().len();
        let widen = if cfg.widen.is_empty() { vec![1.0; n] } else if cfg.widen.len() == 1 { vec![cfg.widen[0]; n] } else { cfg.widen.clone() };
        let gated = if cfg.gated.is_empty() { vec![true; n] } else if cfg.gated.len() == 1 { vec![cfg.gated[0]; n] } else { cfg.gated.clone() };
        let mut i = 0;
        for item in &cfg.layers {
            match item {
                LayerItem::Conv(o) => {
                    let o = wid(*o, widen[i]);
                    base += conv(3, c, o, hw);
                    if gated[i] {
                        gate += (d * o) as u64;
                    }
                    c = o;
                    i += 1;
                }
                LayerItem::Pool(_) => hw /= 2,
            }
        }
    } else {
        let stages = cfg.stages.len();
        let widen = if cfg.widen.is_empty() { vec![1.0; stages] } else if cfg.widen.len() == 1 { vec![cfg.widen[0]; stages] } else { cfg.widen.clone() };
        let all_gated = cfg.gated.is_empty() || cfg.gated == vec![true];
        assert!(all_gated || cfg.gated == vec![false], "oracle handles uniform gating only");
        base += conv(3, c, cfg.stem_channels, hw);
        c = cfg.stem_channels;
        for (si, s) in cfg.stages.iter().enumerate() {
            for b in 0..s.blocks {
                let stride = if b == 0 { s.stride } else { 1 };
                let out_hw = hw.div_ceil(stride);
                match cfg.backbone {
                    Backbone::ResnetBasic => {
                        let mid = wid(s.mid.unwrap_or(s.channels), widen[si]);
                        base += conv(3, c, mid, out_hw) + conv(3, mid, s.channels, out_hw);
                        if all_gated {
                            gate += (d * (mid + if cfg.gate_block_input { c } else { 0 })) as u64;
                        }
                    }
                    bb => {
                        let mid = wid(s.mid.unwrap_or(s.channels / 4), widen[si]);
                        base += conv(1, c, mid, hw) + conv(3, mid, mid, out_hw) + conv(1, mid, s.channels, out_hw);
                        if all_gated {
                            gate += (d * mid * if bb == Backbone::ResnetBottleneckA { 2 } else { 1 }) as u64;
                        }
                    }
                }
                if stride != 1 || c != s.channels {
                    base += conv(1, c, s.channels, out_hw);
                }
                c = s.channels;
                hw = out_hw;
            }
        }
    }
    base += (c * cfg.num_classes) as u64;
    let mut embed = 0;
    let (mut ec, mut ehw) = (cfg.in_channels, cfg.image_size);
    for &o in &cfg.embedding.channels {
        ehw = ehw.div_ceil(2);
        embed += conv(3, ec, o, ehw);
        ec = o;
    }
    embed += (ec * d) as u64;
    (base, embed, gate)
}
