//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node; node ids are assigned in
//! execution order, so the tape is topologically sorted by construction and
//! `backward` simply walks it in reverse.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{conv2d_backward, conv2d_im2col, ConvGeometry};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    ScaleChannels { x: Var, g: Var },
    AddChannelBias { x: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sum { x: Var },
    Scale { x: Var, c: T },
    Softmax { x: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, to be folded into
/// the running estimates by the caller.
#[derive(Clone, Debug)]
pub struct BatchNormObservation<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Per-example live input channel counts reported by a sparse gated conv.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelActivity {
    pub layer: String,
    pub active: Vec<usize>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    recording: bool,
    bound: Vec<(String, Var)>,
    bound_index: HashMap<String, Var>,
    grads: Vec<Option<Tensor<T>>>,
    pattern: Option<DefaultHasher>,
    pub(crate) bn_observations: Vec<BatchNormObservation<T>>,
    pub(crate) activity: Vec<ChannelActivity>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph for training.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            bound: Vec::new(),
            bound_index: HashMap::new(),
            grads: Vec::new(),
            pattern: None,
            bn_observations: Vec::new(),
            activity: Vec::new(),
        }
    }

    /// A non-recording graph: no saved activations, no backward, and gated
    /// convolutions take the sparse path.
    pub fn inference() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Hash every ReLU mask and max-pool argmax seen from now on. Two
    /// evaluations with equal hashes took the same piecewise-linear branch.
    pub fn track_activation_pattern(&mut self) {
        self.pattern = Some(DefaultHasher::new());
    }

    pub fn activation_pattern(&self) -> Option<u64> {
        self.pattern.as_ref().map(|h| h.finish())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn channel_activity(&self) -> &[ChannelActivity] {
        &self.activity
    }

    pub fn batch_norm_observations(&self) -> &[BatchNormObservation<T>] {
        &self.bn_observations
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_value(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Input data; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A differentiable leaf not backed by a parameter set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Bind a named parameter onto the tape (once per graph).
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound_index.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?
            .clone();
        let v = self.leaf(t);
        self.bound.push((name.to_string(), v));
        self.bound_index.insert(name.to_string(), v);
        Ok(v)
    }

    fn record_pattern<H: Hash>(&mut self, item: H) {
        if let Some(h) = self.pattern.as_mut() {
            item.hash(h);
        }
    }

    // ---- ops ---------------------------------------------------------------

    /// Cross-correlation; `x` is `[B, C_in, H, W]`, `k` is `[C_in, k, k, C_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_im2col(self.value(x), self.value(k), stride, pad)?;
        out.ensure_finite("conv2d")?;
        Ok(self.push(out, Op::Conv2d { x, k, stride, pad }, &[x, k]))
    }

    /// Multiply channel `c` of example `b` by `g[b, c]`; `x` is `[B, C, ..]`, `g` is `[B, C]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xs, gs) = (self.shape(x), self.shape(g));
        if xs.len() < 2 || gs.len() != 2 || xs[0] != gs[0] || xs[1] != gs[1] {
            return shape_err(format!("scale_channels: input {xs:?} vs gates {gs:?}"));
        }
        let inner: usize = xs[2..].iter().product();
        let gv = self.value(g).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, &gate) in out.data_mut().chunks_mut(inner).zip(&gv) {
            for v in chunk {
                *v *= gate;
            }
        }
        Ok(self.push(out, Op::ScaleChannels { x, g }, &[x, g]))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return shape_err(format!("channel bias {:?} for input {xs:?}", self.shape(b)));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bias = bv[i % c];
            for v in chunk {
                *v += bias;
            }
        }
        Ok(self.push(out, Op::AddChannelBias { x, b }, &[x, b]))
    }

    /// Per-channel batch normalization over `[B, C, H, W]`.
    ///
    /// With `running = None` the batch statistics are used and reported via
    /// [`Graph::batch_norm_observations`] under `name`; otherwise the given
    /// `(mean, var)` are used and examples stay independent.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        name: &str,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return shape_err(format!("batch_norm on {xs:?}"));
        }
        let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let n = b * plane;
        let eps = T::lit(BN_EPS);
        let xv = self.value(x).data();
        let (mean, var) = match running {
            Some((m, v)) => (m.data().to_vec(), v.data().to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s += xv[(bi * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                    }
                    let m = s / T::lit(n as f64);
                    let mut q = T::zero();
                    for bi in 0..b {
                        for &v in &xv[(bi * c + ch) * plane..][..plane] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / T::lit(n as f64);
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(&xs);
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out.data_mut()[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let batch_stats = running.is_none();
        if batch_stats {
            let scale = if n > 1 { T::lit(n as f64 / (n - 1) as f64) } else { T::one() };
            self.bn_observations.push(BatchNormObservation {
                name: name.to_string(),
                mean: mean.clone(),
                var_unbiased: var.iter().map(|&v| v * scale).collect(),
            });
        }
        out.ensure_finite("batch_norm")?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        if self.pattern.is_some() {
            let mask: Vec<bool> = out.data().iter().map(|&v| v > T::zero()).collect();
            self.record_pattern(mask);
        }
        self.push(out, Op::Relu { x }, &[x])
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return shape_err(format!("max_pool2 needs [B,C,H>=2,W>=2], got {xs:?}"));
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[xs[0], xs[1], ho, wo]);
        let mut argmax = vec![0u32; bc * ho * wo];
        for p in 0..bc {
            for s in 0..ho {
                for t in 0..wo {
                    let mut best = (2 * s) * w + 2 * t;
                    for (du, dv) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * s + du) * w + 2 * t + dv;
                        if xv[p * h * w + i] > xv[p * h * w + best] {
                            best = i;
                        }
                    }
                    let o = (p * ho + s) * wo + t;
                    out.data_mut()[o] = xv[p * h * w + best];
                    argmax[o] = (p * h * w + best) as u32;
                }
            }
        }
        if self.pattern.is_some() {
            self.record_pattern(&argmax);
        }
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("global_avg_pool needs [B,C,H,W], got {xs:?}"));
        }
        let plane = xs[2] * xs[3];
        let inv = T::one() / T::lit(plane as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![xs[0], xs[1]], data)?;
        Ok(self.push(out, Op::GlobalAvgPool { x }, &[x]))
    }

    /// `x[B, d] . w[d, m] (+ b[m])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return shape_err(format!("linear: input {xs:?} vs weight {ws:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return shape_err(format!("linear bias {:?} for width {}", self.shape(b), ws[1]));
            }
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut out = Tensor::zeros(&[n, m]);
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            let od = out.data_mut();
            for r in 0..n {
                let row = &mut od[r * m..(r + 1) * m];
                if let Some(b) = b {
                    row.copy_from_slice(self.value(b).data());
                }
                for i in 0..d {
                    let a = xv[r * d + i];
                    if a == T::zero() {
                        continue;
                    }
                    for (o, &wv) in row.iter_mut().zip(&wv[i * m..(i + 1) * m]) {
                        *o += a * wv;
                    }
                }
            }
        }
        out.ensure_finite("linear")?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// Row-wise softmax of `[B, C]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return shape_err(format!("softmax needs [B,C], got {xs:?}"));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(xs[1]) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    /// Batch mean of `-log softmax(logits)[label]`, max-subtracted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return shape_err(format!("cross entropy: logits {ls:?} for {} labels", labels.len()));
        }
        let (n, c) = (ls[0], ls[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label, classes: c });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / T::lit(n as f64));
        out.ensure_finite("softmax_cross_entropy")?;
        let op = Op::SoftmaxXent { logits, labels: labels.to_vec(), probs };
        Ok(self.push(out, op, &[logits]))
    }

    // ---- backward ----------------------------------------------------------

    /// Populate gradients of the scalar `loss` with respect to every node on
    /// the tape that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.recording {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(gout);
                continue;
            }
            self.backward_node(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, id: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, stride, pad } => {
                let (dx, dk) = conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    gout,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*k),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *k, dk);
                }
            }
            Op::ScaleChannels { x, g } => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                let gv = self.value(*g).data();
                if self.needs(*x) {
                    let mut dx = gout.clone();
                    for (chunk, &gate) in dx.data_mut().chunks_mut(inner).zip(gv) {
                        for v in chunk {
                            *v *= gate;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*g) {
                    let xv = self.value(*x).data();
                    let dg: Vec<T> = gout
                        .data()
                        .chunks(inner)
                        .zip(xv.chunks(inner))
                        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| p * q).sum())
                        .collect();
                    accumulate(grads, *g, Tensor::new(self.shape(*g).to_vec(), dg).unwrap());
                }
            }
            Op::AddChannelBias { x, b } => {
                if self.needs(*x) {
                    accumulate(grads, *x, gout.clone());
                }
                if self.needs(*b) {
                    let xs = self.shape(*x);
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in gout.data().chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    accumulate(grads, *b, Tensor::new(vec![c], db).unwrap());
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let xs = self.shape(*x);
                let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let n = T::lit((b * plane) as f64);
                let gy = gout.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += gy[i] * xhat[i];
                            dbeta[ch] += gy[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xs);
                    let dxd = dx.data_mut();
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            for i in off..off + plane {
                                dxd[i] = if *batch_stats {
                                    gam[ch] * inv_std[ch] / n
                                        * (n * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * gy[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![c], dgamma).unwrap());
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(vec![c], dbeta).unwrap());
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let mut dx = gout.clone();
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    for (&src, &g) in argmax.iter().zip(gout.data()) {
                        dx.data_mut()[src as usize] += g;
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let plane = xs[2] * xs[3];
                    let inv = T::one() / T::lit(plane as f64);
                    let mut dx = Tensor::zeros(xs);
                    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(gout.data()) {
                        chunk.fill(g * inv);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, d, m) = (xs[0], xs[1], ws[1]);
                let gy = gout.data();
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = Tensor::zeros(xs);
                    for r in 0..n {
                        for i in 0..d {
                            let mut acc = T::zero();
                            for (&g, &wv) in gy[r * m..(r + 1) * m].iter().zip(&wv[i * m..(i + 1) * m]) {
                                acc += g * wv;
                            }
                            dx.data_mut()[r * d + i] = acc;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let xv = self.value(*x).data();
                    let mut dw = Tensor::zeros(ws);
                    for r in 0..n {
                        for i in 0..d {
                            let a = xv[r * d + i];
                            if a == T::zero() {
                                continue;
                            }
                            let dst = &mut dw.data_mut()[i * m..(i + 1) * m];
                            for (o, &g) in dst.iter_mut().zip(&gy[r * m..(r + 1) * m]) {
                                *o += a * g;
                            }
                        }
                    }
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); m];
                        for row in gy.chunks(m) {
                            for (o, &g) in db.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        accumulate(grads, *b, Tensor::new(vec![m], db).unwrap());
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gout.clone());
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::full(self.shape(*x), gout.item()));
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    accumulate(grads, *x, gout.map(|g| g * *c));
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let c = self.shape(*x)[1];
                    let y = node.value.data();
                    let mut dx = gout.clone();
                    for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.chunks(c)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                        for (d, &p) in drow.iter_mut().zip(yrow) {
                            *d = p * (*d - dot);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                if self.needs(*logits) {
                    let ls = self.shape(*logits);
                    let c = ls[1];
                    let scale = gout.item() / T::lit(ls[0] as f64);
                    let mut d = probs.clone();
                    for (row, &y) in d.chunks_mut(c).zip(labels) {
                        row[y] -= T::one();
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(grads, *logits, Tensor::new(ls.to_vec(), d).unwrap());
                }
            }
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter of `params`; parameters that were not
    /// bound or not reached by the loss get zeros.
    pub fn param_grads(&self, params: &ParamSet<T>) -> HashMap<String, Tensor<T>> {
        params
            .iter()
            .map(|(name, t)| {
                let g = self
                    .bound_index
                    .get(name)
                    .and_then(|&v| self.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.to_string(), g)
            })
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Geometry helper shared with the FLOPs planner.
pub fn conv_output_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let g = ConvGeometry { batch: 1, c_in: 1, h, w, k, c_out: 1, stride, pad };
    (g.h_out(), g.w_out())
}
