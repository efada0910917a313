//! Channel-gated convolution as a mixture of experts.
//!
//! For a kernel `K` of shape `[C_in, k, k, C_out]` and nonnegative gates `g`,
//! `conv(g ⊙ x, K) = Σ_i g_i (K_i * x_i)`: each input channel's contribution
//! is an expert and the gate vector mixes them. A gate of exactly zero removes
//! the expert, which the sparse path exploits by never touching that channel.

use crate::error::{shape_err, Error, Result};
use crate::graph::{ChannelActivity, Graph, Var};
use crate::kernels::{conv_example, ConvGeometry};
use crate::params::{normal_init, ParamGroup, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gate values of one example at one gated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector<T> {
    pub layer: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> GateVector<T> {
    pub fn new(layer: usize, values: Vec<T>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= T::zero())) {
            return Err(Error::Contract(format!("gate vector for layer {layer} has negative entries")));
        }
        Ok(Self { layer, values })
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    /// Channels with a strictly positive gate.
    pub fn support(&self) -> Vec<usize> {
        self.values.iter().enumerate().filter(|(_, &v)| v > T::zero()).map(|(i, _)| i).collect()
    }

    pub fn active_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > T::zero()).count()
    }

    /// Fraction of exact zeros.
    pub fn sparsity(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        1.0 - self.active_count() as f64 / self.values.len() as f64
    }
}

/// One per-layer head `ReLU(e · W)` of the multi-headed gating network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateHead {
    pub name: String,
    pub layer: usize,
    pub embed_dim: usize,
    pub width: usize,
    pub bias: bool,
}

impl GateHead {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.embed_dim * self.width + if self.bias { self.width } else { 0 }
    }

    /// Add this head's `[embed_dim, width]` weight (and optional bias) to `params`.
    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, seed: u64) {
        let w = self.weight_name();
        let std = (2.0 / self.embed_dim as f64).sqrt();
        params.insert(&w, normal_init(&[self.embed_dim, self.width], std, seed, &w), ParamGroup::Gate, true);
        if self.bias {
            params.insert(&self.bias_name(), Tensor::zeros(&[self.width]), ParamGroup::Gate, true);
        }
    }
}

/// `G(e) = ReLU(e · W)` for a batch of embeddings `e: [B, embed_dim]`.
pub fn gate_forward<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamSet<T>,
    head: &GateHead,
    e: Var,
) -> Result<Var> {
    let es = graph.shape(e);
    if es.len() != 2 || es[1] != head.embed_dim {
        return shape_err(format!(
            "gate head {} expects embeddings [B,{}], got {es:?}",
            head.name, head.embed_dim
        ));
    }
    let w = graph.param(params, &head.weight_name())?;
    let b = if head.bias { Some(graph.param(params, &head.bias_name())?) } else { None };
    let z = graph.linear(e, w, b)?;
    Ok(graph.relu(z))
}

/// Gate vector for a single embedding `e: [embed_dim]`.
pub fn gate_vector<T: Scalar>(params: &ParamSet<T>, head: &GateHead, e: &Tensor<T>) -> Result<GateVector<T>> {
    let mut g = Graph::inference();
    let ev = g.constant(e.clone().reshape(&[1, e.numel()])?);
    let out = gate_forward(&mut g, params, head, ev)?;
    GateVector::new(head.layer, g.value(out).data().to_vec())
}

fn check_gates<T: Scalar>(gates: &Tensor<T>, batch: usize, channels: usize) -> Result<()> {
    if gates.shape() != [batch, channels] {
        return shape_err(format!("gates {:?} for input of {batch}x{channels}", gates.shape()));
    }
    if gates.data().iter().any(|&v| !(v >= T::zero())) {
        return Err(Error::Contract("gate values must be nonnegative".into()));
    }
    Ok(())
}

/// Dense, differentiable gated convolution: `conv2d(g ⊙ x, K)`.
pub fn gated_conv_dense<T: Scalar>(
    graph: &mut Graph<T>,
    x: Var,
    kernel: Var,
    gates: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let xs = graph.shape(x).to_vec();
    if xs.len() != 4 {
        return shape_err(format!("gated conv input must be [B,C,H,W], got {xs:?}"));
    }
    check_gates(graph.value(gates), xs[0], xs[1])?;
    let scaled = graph.scale_channels(x, gates)?;
    graph.conv2d(scaled, kernel, stride, pad)
}

#[derive(Clone, Debug)]
pub struct SparseConvOutput<T> {
    pub output: Tensor<T>,
    /// Live input channels per example.
    pub active: Vec<usize>,
}

/// Inference-only gated convolution touching only channels with `g > 0`.
///
/// Per example the live channels are gathered (pre-multiplied by their gate)
/// into a compacted buffer and the matching kernel rows, which are contiguous
/// in the `[C_in, k, k, C_out]` layout, are convolved densely over the reduced
/// channel count.
pub fn gated_conv_sparse<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    gates: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<SparseConvOutput<T>> {
    let g = ConvGeometry::infer(input.shape(), kernel.shape(), stride, pad)?;
    check_gates(gates, g.batch, g.c_in)?;
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane_in = g.h * g.w;
    let krows = g.k * g.k * g.c_out;
    let per_out = g.c_out * ho * wo;
    let mut output = Tensor::zeros(&[g.batch, g.c_out, ho, wo]);
    let mut active = Vec::with_capacity(g.batch);
    let (mut xbuf, mut kbuf, mut cols) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..g.batch {
        let gv = gates.slab(b);
        let x = input.slab(b);
        xbuf.clear();
        kbuf.clear();
        for (i, &gi) in gv.iter().enumerate() {
            if gi > T::zero() {
                xbuf.extend(x[i * plane_in..(i + 1) * plane_in].iter().map(|&v| v * gi));
                kbuf.extend_from_slice(&kernel.data()[i * krows..(i + 1) * krows]);
            }
        }
        let n = kbuf.len() / krows;
        active.push(n);
        if n > 0 {
            let dst = &mut output.data_mut()[b * per_out..(b + 1) * per_out];
            conv_example(&xbuf, &kbuf, &g, n, &mut cols, dst);
        }
    }
    output.ensure_finite("gated_conv_sparse")?;
    Ok(SparseConvOutput { output, active })
}

/// Gated convolution on a graph: dense when recording, sparse otherwise.
/// The sparse path logs per-example live channel counts under `layer`.
pub fn gated_conv<T: Scalar>(
    graph: &mut Graph<T>,
    x: Var,
    kernel: Var,
    gates: Var,
    stride: usize,
    pad: usize,
    layer: &str,
) -> Result<Var> {
    if graph.is_recording() {
        return gated_conv_dense(graph, x, kernel, gates, stride, pad);
    }
    let out = gated_conv_sparse(graph.value(x), graph.value(kernel), graph.value(gates), stride, pad)?;
    graph.activity.push(ChannelActivity { layer: layer.to_string(), active: out.active });
    Ok(graph.push_value(out.output))
}

/// Gated feature vector `g ⊙ x` for `x: [B, C]`, logging live counts when not recording.
pub fn gated_features<T: Scalar>(graph: &mut Graph<T>, x: Var, gates: Var, layer: &str) -> Result<Var> {
    let xs = graph.shape(x).to_vec();
    if xs.len() != 2 {
        return shape_err(format!("gated features must be [B,C], got {xs:?}"));
    }
    check_gates(graph.value(gates), xs[0], xs[1])?;
    if !graph.is_recording() {
        let active = graph
            .value(gates)
            .data()
            .chunks(xs[1])
            .map(|r| r.iter().filter(|&&v| v > T::zero()).count())
            .collect();
        graph.activity.push(ChannelActivity { layer: layer.to_string(), active });
    }
    graph.scale_channels(x, gates)
}

/// Reference mixture: `z = Σ_i g_i (K_i * x_i)` for one example `[C_in, H, W]`,
/// each expert evaluated by its own direct single-channel correlation.
pub fn moe_oracle<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    gates: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 3 {
        return shape_err(format!("moe_oracle takes one example [C,H,W], got {s:?}"));
    }
    let mut shape4 = vec![1];
    shape4.extend_from_slice(s);
    let g = ConvGeometry::infer(&shape4, kernel.shape(), stride, pad)?;
    if gates.len() != g.c_in {
        return shape_err(format!("{} gates for {} channels", gates.len(), g.c_in));
    }
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.k);
    let mut z = Tensor::zeros(&[g.c_out, ho, wo]);
    let x = input.data();
    let kd = kernel.data();
    for (i, &gi) in gates.iter().enumerate() {
        // expert i: single-channel correlation K_i * x_i
        let mut expert = vec![T::zero(); g.c_out * ho * wo];
        for o in 0..g.c_out {
            for sy in 0..ho {
                for tx in 0..wo {
                    let mut acc = T::zero();
                    for u in 0..k {
                        for v in 0..k {
                            let iy = (sy * stride + u) as isize - pad as isize;
                            let ix = (tx * stride + v) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                acc += kd[((i * k + u) * k + v) * g.c_out + o]
                                    * x[(i * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    expert[(o * ho + sy) * wo + tx] = acc;
                }
            }
        }
        for (zv, &ev) in z.data_mut().iter_mut().zip(&expert) {
            *zv += gi * ev;
        }
    }
    Ok(z)
}

/// `Σ_l ‖g^l‖₁` over every gate tensor given; equals the plain sum since gates are nonnegative.
pub fn l1_gate_penalty<T: Scalar>(graph: &mut Graph<T>, gates: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &g in gates {
        if graph.value(g).data().iter().any(|&v| !(v >= T::zero())) {
            return Err(Error::Contract("l1 gate penalty on negative gates".into()));
        }
        let s = graph.sum(g);
        total = Some(match total {
            Some(t) => graph.add(t, s)?,
            None => s,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => graph.constant(Tensor::scalar(T::zero())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(d: usize, c: usize) -> GateHead {
        GateHead { name: "gate.0".into(), layer: 0, embed_dim: d, width: c, bias: false }
    }

    #[test]
    fn zero_weight_gives_zero_gates() {
        let h = head(4, 3);
        let mut ps = ParamSet::<f32>::default();
        ps.insert(&h.weight_name(), Tensor::zeros(&[4, 3]), ParamGroup::Gate, true);
        let gv = gate_vector(&ps, &h, &Tensor::from_fn(&[4], |i| i as f32 - 1.0)).unwrap();
        assert_eq!(gv.values, vec![0.0; 3]);
        assert_eq!(gv.sparsity(), 1.0);
    }

    #[test]
    fn hand_computed_gate() {
        // 3 -> 2 map with rows (1,1,0) and (0,0,1): pre-activations (-1, 3).
        let h = head(3, 2);
        let mut ps = ParamSet::<f64>::default();
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        ps.insert(&h.weight_name(), w, ParamGroup::Gate, true);
        let e = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(gate_vector(&ps, &h, &e).unwrap().values, vec![0.0, 3.0]);
    }

    #[test]
    fn gate_dim_mismatch() {
        let h = head(3, 2);
        let mut ps = ParamSet::<f64>::default();
        h.init(&mut ps, 0);
        assert!(gate_vector(&ps, &h, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn negative_gates_are_a_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 3], 1.0));
        let k = g.leaf(Tensor::full(&[2, 3, 3, 1], 1.0));
        let gates = g.leaf(Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap());
        assert!(matches!(gated_conv_dense(&mut g, x, k, gates, 1, 0), Err(Error::Contract(_))));
        assert!(GateVector::new(0, vec![0.0, -1.0]).is_err());
    }

    #[test]
    fn all_zero_gates_sparse() {
        let x = Tensor::<f32>::full(&[2, 3, 4, 4], 1.0);
        let k = Tensor::full(&[3, 3, 3, 2], 1.0);
        let out = gated_conv_sparse(&x, &k, &Tensor::zeros(&[2, 3]), 1, 1).unwrap();
        assert_eq!(out.active, vec![0, 0]);
        assert!(out.output.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_penalty_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let p = l1_gate_penalty(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(p).item(), 6.0);
        g.backward(p).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0]);
        let z = g.leaf(Tensor::zeros(&[1, 4]));
        let p = l1_gate_penalty(&mut g, &[z]).unwrap();
        assert_eq!(g.value(p).item(), 0.0);
    }
}
