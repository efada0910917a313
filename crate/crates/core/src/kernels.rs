//! Convolution kernels: the im2col fast path used by the tape, and the direct
//! six-loop cross-correlation kept as the reference.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Multiply-accumulates for one example with `active_in` live input channels.
    pub fn macs_per_example(&self, active_in: usize) -> u64 {
        (self.k * self.k * active_in * self.c_out * self.h_out() * self.w_out()) as u64
    }

    /// Validate a `[B, C, H, W]` input against a `[C_in, k, k, C_out]` kernel.
    pub fn infer(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return shape_err(format!("conv2d input must be [B,C,H,W], got {input:?}"));
        }
        if kernel.len() != 4 || kernel[1] != kernel[2] {
            return shape_err(format!("conv2d kernel must be [C_in,k,k,C_out], got {kernel:?}"));
        }
        if stride == 0 {
            return shape_err("conv2d stride must be positive");
        }
        let g = Self {
            batch: input[0],
            c_in: input[1],
            h: input[2],
            w: input[3],
            k: kernel[1],
            c_out: kernel[3],
            stride,
            pad,
        };
        if kernel[0] != g.c_in {
            return shape_err(format!(
                "conv2d kernel expects {} input channels, input has {}",
                kernel[0], g.c_in
            ));
        }
        if g.k > g.h + 2 * pad || g.k > g.w + 2 * pad {
            return shape_err(format!(
                "conv2d kernel {} larger than padded input {}x{} (pad {pad})",
                g.k, g.h, g.w
            ));
        }
        Ok(g)
    }
}

/// Unfold one example `[C, H, W]` into `cols[(c*k + u)*k + v][p]`, `p` over output pixels.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, c_in: usize, cols: &mut [T]) {
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.k);
    let plane = ho * wo;
    for c in 0..c_in {
        for u in 0..k {
            for v in 0..k {
                let row = &mut cols[((c * k + u) * k + v) * plane..][..plane];
                for s in 0..ho {
                    let iy = (s * g.stride + u) as isize - g.pad as isize;
                    let dst = &mut row[s * wo..(s + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let ix = (t * g.stride + v) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.k);
    let plane = ho * wo;
    for c in 0..g.c_in {
        for u in 0..k {
            for v in 0..k {
                let row = &cols[((c * k + u) * k + v) * plane..][..plane];
                for s in 0..ho {
                    let iy = (s * g.stride + u) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for t in 0..wo {
                        let ix = (t * g.stride + v) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += row[s * wo + t];
                        }
                    }
                }
            }
        }
    }
}

/// One example: `out[o][p] = sum_r kernel[r][o] * cols[r][p]` for the first
/// `c_in` channels of `x` and the first `c_in * k * k` kernel rows.
pub(crate) fn conv_example<T: Scalar>(
    x: &[T],
    kernel: &[T],
    g: &ConvGeometry,
    c_in: usize,
    cols: &mut Vec<T>,
    out: &mut [T],
) {
    let plane = g.h_out() * g.w_out();
    let rows = c_in * g.k * g.k;
    cols.resize(rows * plane, T::zero());
    im2col(x, g, c_in, cols);
    out.fill(T::zero());
    for r in 0..rows {
        let col = &cols[r * plane..(r + 1) * plane];
        let krow = &kernel[r * g.c_out..(r + 1) * g.c_out];
        for (o, &kv) in krow.iter().enumerate() {
            if kv == T::zero() {
                continue;
            }
            let dst = &mut out[o * plane..(o + 1) * plane];
            for (d, &c) in dst.iter_mut().zip(col) {
                *d += kv * c;
            }
        }
    }
}

/// Batched im2col convolution; `input` is `[B, C_in, H, W]`.
pub fn conv2d_im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::infer(input.shape(), kernel.shape(), stride, pad)?;
    let (ho, wo) = (g.h_out(), g.w_out());
    let mut out = Tensor::zeros(&[g.batch, g.c_out, ho, wo]);
    let per_out = g.c_out * ho * wo;
    let mut cols = Vec::new();
    for b in 0..g.batch {
        let dst = &mut out.data_mut()[b * per_out..(b + 1) * per_out];
        conv_example(input.slab(b), kernel.data(), &g, g.c_in, &mut cols, dst);
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input and/or kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = ConvGeometry::infer(input.shape(), kernel.shape(), stride, pad)
        .expect("shapes validated in forward");
    let plane = g.h_out() * g.w_out();
    let rows = g.c_in * g.k * g.k;
    let per_in = g.c_in * g.h * g.w;
    let mut dx = want_input.then(|| Tensor::zeros(input.shape()));
    let mut dk = want_kernel.then(|| Tensor::zeros(kernel.shape()));
    let mut cols = vec![T::zero(); rows * plane];
    let mut dcols = vec![T::zero(); rows * plane];
    let kd = kernel.data();
    for b in 0..g.batch {
        let gout = grad_out.slab(b);
        if let Some(dk) = dk.as_mut() {
            im2col(input.slab(b), &g, g.c_in, &mut cols);
            let dkd = dk.data_mut();
            for r in 0..rows {
                let col = &cols[r * plane..(r + 1) * plane];
                for o in 0..g.c_out {
                    let go = &gout[o * plane..(o + 1) * plane];
                    let mut acc = T::zero();
                    for (&a, &c) in go.iter().zip(col) {
                        acc += a * c;
                    }
                    dkd[r * g.c_out + o] += acc;
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(T::zero());
            for r in 0..rows {
                let dst = &mut dcols[r * plane..(r + 1) * plane];
                for o in 0..g.c_out {
                    let kv = kd[r * g.c_out + o];
                    if kv == T::zero() {
                        continue;
                    }
                    let go = &gout[o * plane..(o + 1) * plane];
                    for (d, &a) in dst.iter_mut().zip(go) {
                        *d += kv * a;
                    }
                }
            }
            col2im(&dcols, &g, &mut dx.data_mut()[b * per_in..(b + 1) * per_in]);
        }
    }
    (dx, dk)
}

/// Direct cross-correlation by explicit summation over `(b, o, s, t, i, u, v)`.
/// Slow; retained as the reference the im2col path must agree with.
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::infer(input.shape(), kernel.shape(), stride, pad)?;
    let (ho, wo) = (g.h_out(), g.w_out());
    let x = input.data();
    let kd = kernel.data();
    let mut out = Tensor::zeros(&[g.batch, g.c_out, ho, wo]);
    let od = out.data_mut();
    for b in 0..g.batch {
        for o in 0..g.c_out {
            for s in 0..ho {
                for t in 0..wo {
                    let mut acc = T::zero();
                    for i in 0..g.c_in {
                        for u in 0..g.k {
                            for v in 0..g.k {
                                let iy = (s * stride + u) as isize - pad as isize;
                                let ix = (t * stride + v) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x[((b * g.c_in + i) * g.h + iy as usize) * g.w + ix as usize];
                                acc += kd[((i * g.k + u) * g.k + v) * g.c_out + o] * xv;
                            }
                        }
                    }
                    od[((b * g.c_out + o) * ho + s) * wo + t] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims_follow_floor_formula() {
        let g = ConvGeometry::infer(&[1, 1, 7, 5], &[1, 3, 3, 1], 2, 1).unwrap();
        assert_eq!((g.h_out(), g.w_out()), (4, 3));
    }

    #[test]
    fn rejects_oversized_kernel_and_channel_mismatch() {
        assert!(ConvGeometry::infer(&[1, 1, 2, 2], &[1, 5, 5, 1], 1, 1).is_err());
        assert!(ConvGeometry::infer(&[1, 2, 4, 4], &[3, 3, 3, 1], 1, 0).is_err());
    }

    #[test]
    fn im2col_matches_direct_with_stride_and_padding() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 5, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
        let k = Tensor::<f64>::from_fn(&[3, 3, 3, 4], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let a = conv2d_im2col(&x, &k, stride, pad).unwrap();
            let b = conv2d_direct(&x, &k, stride, pad).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
