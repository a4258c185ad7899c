//! Differentiable primitives. Every forward op has a matching `*_backward`
//! that maps an upstream gradient to gradients of its inputs.
//!
//! Every reduction runs in an order fixed by the operand shapes alone, so
//! repeated calls are bitwise identical.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norm floor below which `l2_normalize` refuses to divide.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [c_in, h, w] = input.dims::<3>("conv2d")?;
        let [c_out, kc, kh, kw] = kernel.dims::<4>("conv2d")?;
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("stride", "must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output rows/cols whose receptive tap `k` lands inside an input extent `n`.
    fn valid_range(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        // need 0 <= o*stride + k - pad < n
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        let hi = if n + self.pad > k {
            ((n + self.pad - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Row-major `[C_in·kh·kw, H'·W']` patch matrix of a `[C_in, H, W]` input.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let hw_out = g.ho * g.wo;
    let mut cols = vec![0.0; g.c_in * g.kh * g.kw * hw_out];
    for ci in 0..g.c_in {
        let in_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[r * hw_out..(r + 1) * hw_out];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &in_plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut dst_row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto the input grid.
fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let hw_out = g.ho * g.wo;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let in_plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &cols[r * hw_out..(r + 1) * hw_out];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut in_plane[iy * g.w..(iy + 1) * g.w];
                    let src = &src_row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
    x
}

/// Matrix view: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
struct Layout {
    rs: usize,
    cs: usize,
}

fn row_major(cols: usize) -> Layout {
    Layout { rs: cols, cs: 1 }
}

/// Transposed view of a row-major buffer with `cols` columns.
fn transposed(cols: usize) -> Layout {
    Layout { rs: 1, cs: cols }
}

/// `c = a · b` for an `m×k` by `k×n` product into a row-major `m×n` buffer.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    assert!((m == 0 || k == 0) || (m - 1) * la.rs + (k - 1) * la.cs < a.len());
    assert!((k == 0 || n == 0) || (k - 1) * lb.rs + (n - 1) * lb.cs < b.len());
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches, and `c`
    // is an exclusively borrowed, densely packed m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation with zero padding. No kernel flip.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, stride, pad)?;
    let ckk = g.c_in * g.kh * g.kw;
    let hw_out = g.ho * g.wo;
    let cols = im2col(input.data(), &g);
    let mut out = vec![0.0; g.c_out * hw_out];
    gemm(g.c_out, ckk, hw_out, kernel.data(), row_major(ckk), &cols, row_major(hw_out), &mut out);
    Ok(Tensor::raw(vec![g.c_out, g.ho, g.wo], out))
}

/// Gradients of `conv2d` w.r.t. its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input, kernel, stride, pad)?;
    if grad_out.shape() != [g.c_out, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?} != output {:?}",
                grad_out.shape(),
                [g.c_out, g.ho, g.wo]
            ),
        ));
    }
    let ckk = g.c_in * g.kh * g.kw;
    let hw_out = g.ho * g.wo;
    let cols = im2col(input.data(), &g);
    let mut gk = vec![0.0; g.c_out * ckk];
    // dK = dY · colsᵀ
    gemm(g.c_out, hw_out, ckk, grad_out.data(), row_major(hw_out), &cols, transposed(hw_out), &mut gk);
    // dcols = Kᵀ · dY
    let mut gcols = vec![0.0; ckk * hw_out];
    gemm(ckk, g.c_out, hw_out, kernel.data(), transposed(ckk), grad_out.data(), row_major(hw_out), &mut gcols);
    Ok((
        Tensor::raw(input.shape().to_vec(), col2im(&gcols, &g)),
        Tensor::raw(kernel.shape().to_vec(), gk),
    ))
}

/// Adds `bias[c]` to every cell of channel `c` of a `[C, H, W]` tensor.
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input.dims::<3>("add_channel_bias")?;
    if bias.shape() != [c] {
        return Err(Error::shape(
            "add_channel_bias",
            format!("bias {:?} for {c} channels", bias.shape()),
        ));
    }
    let mut out = input.data().to_vec();
    for (plane, b) in out.chunks_mut(h * w).zip(bias.data()) {
        for v in plane {
            *v += b;
        }
    }
    Ok(Tensor::raw(vec![c, h, w], out))
}

/// Bias gradient: per-channel sum of the upstream gradient.
pub fn channel_bias_backward(grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = grad_out.dims::<3>("channel_bias_backward")?;
    Ok(Tensor::raw(
        vec![c],
        grad_out.data().chunks(h * w).map(|p| p.iter().sum()).collect(),
    ))
}

/// Affine map `weight · input + bias`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [d_out, d_in] = weight.dims::<2>("linear")?;
    if input.shape() != [d_in] || bias.shape() != [d_out] {
        return Err(Error::shape(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let x = input.data();
    let out = (0..d_out)
        .map(|o| {
            let row = weight.row(o);
            let mut acc = bias.data()[o];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            acc
        })
        .collect();
    Ok(Tensor::raw(vec![d_out], out))
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [d_out, d_in] = weight.dims::<2>("linear_backward")?;
    if input.shape() != [d_in] || grad_out.shape() != [d_out] {
        return Err(Error::shape(
            "linear_backward",
            format!("input {:?}, grad_out {:?}", input.shape(), grad_out.shape()),
        ));
    }
    let (x, go) = (input.data(), grad_out.data());
    let mut gx = vec![0.0; d_in];
    let mut gw = vec![0.0; d_out * d_in];
    for o in 0..d_out {
        let row = weight.row(o);
        let gwr = &mut gw[o * d_in..(o + 1) * d_in];
        for i in 0..d_in {
            gx[i] += row[i] * go[o];
            gwr[i] = go[o] * x[i];
        }
    }
    Ok((
        Tensor::raw(vec![d_in], gx),
        Tensor::raw(vec![d_out, d_in], gw),
        grad_out.clone(),
    ))
}

/// Global average pooling `[C, H, W] -> [C]`.
pub fn gap(input: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input.dims::<3>("gap")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("gap", "empty spatial extent"));
    }
    let n = (h * w) as f64;
    Ok(Tensor::raw(
        vec![c],
        input
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / n)
            .collect(),
    ))
}

pub fn gap_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = input_shape else {
        return Err(Error::shape("gap_backward", format!("{input_shape:?}")));
    };
    if grad_out.shape() != [c] {
        return Err(Error::shape("gap_backward", format!("{:?}", grad_out.shape())));
    }
    let n = (h * w) as f64;
    let mut out = Vec::with_capacity(c * h * w);
    for g in grad_out.data() {
        out.extend(std::iter::repeat_n(g / n, h * w));
    }
    Ok(Tensor::raw(vec![c, h, w], out))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Gradient of relu, taking 0 at the kink.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape("relu_backward", "shape mismatch"));
    }
    Ok(Tensor::raw(
        input.shape().to_vec(),
        input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}

/// Two-way softmax with max subtraction.
pub fn softmax_pair(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    (ea / s, eb / s)
}

/// Pulls `(grad_pa, grad_pb)` back through `softmax_pair` given its outputs.
pub fn softmax_pair_backward(pa: f64, pb: f64, grad_pa: f64, grad_pb: f64) -> (f64, f64) {
    let dot = pa * grad_pa + pb * grad_pb;
    (pa * (grad_pa - dot), pb * (grad_pb - dot))
}

pub fn l2_normalize(input: &Tensor) -> Result<Tensor> {
    let n = input.norm();
    if !(n > MIN_NORM) {
        return Err(Error::Degenerate {
            op: "l2_normalize",
            detail: format!("vector norm {n:e} is below {MIN_NORM:e}"),
        });
    }
    Ok(input.scale(1.0 / n))
}

/// Backward of `y = x / |x|`: `(g - y (y·g)) / |x|`.
pub fn l2_normalize_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let y = l2_normalize(input)?;
    let n = input.norm();
    let dot: f64 = y.data().iter().zip(grad_out.data()).map(|(a, b)| a * b).sum();
    Ok(Tensor::raw(
        input.shape().to_vec(),
        y.data()
            .iter()
            .zip(grad_out.data())
            .map(|(yv, g)| (g - yv * dot) / n)
            .collect(),
    ))
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Σ exp(v)` with max subtraction; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy for one sample. Returns `(loss, d loss / d logits)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::invalid(
            "target",
            format!("class {target} out of range for {} logits", logits.len()),
        ));
    }
    let lse = log_sum_exp(logits);
    let grad = logits
        .iter()
        .enumerate()
        .map(|(c, &l)| (l - lse).exp() - if c == target { 1.0 } else { 0.0 })
        .collect();
    Ok((lse - logits[target], grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_conv_sums_the_window() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let x = Tensor::from_fn(&[2, 5, 5], |i| (i as f64).sin());
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), [3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), 1, 0),
            Err(Error::Shape { .. })
        ));
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 7, 7]), 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), 0, 1).is_err());
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let x = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let b = Tensor::vector(vec![0.1, 0.2]);
        assert_eq!(linear(&x, &Tensor::zeros(&[2, 3]), &b).unwrap(), b);
        assert!(linear(&x, &Tensor::zeros(&[2, 4]), &b).is_err());
    }

    #[test]
    fn gap_of_known_channel() {
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        assert_eq!(gap(&x).unwrap().data(), [2.5, 7.0]);
    }

    #[test]
    fn softmax_pair_values() {
        assert_eq!(softmax_pair(3.0, 3.0), (0.5, 0.5));
        let (a, b) = softmax_pair(1.0, 0.0);
        assert!((a - 0.73106).abs() < 1e-5 && (b - 0.26894).abs() < 1e-5);
        // no overflow at extreme logits
        let (a, b) = softmax_pair(1000.0, -1000.0);
        assert_eq!((a, b), (1.0, 0.0));
    }

    #[test]
    fn l2_normalize_unit_and_degenerate() {
        let u = Tensor::vector(vec![0.6, 0.0, -0.8]);
        assert!(l2_normalize(&u).unwrap().max_abs_diff(&u) < 1e-15);
        assert!(matches!(
            l2_normalize(&Tensor::vector(vec![1e-14, 0.0])),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.5) - 0.974_076_984_4).abs() < 1e-9);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (l, g) = softmax_cross_entropy(&[0.3, -1.2], 1).unwrap();
        assert!((l - (1.0f64 + (1.5f64).exp()).ln()).abs() < 1e-12);
        assert!((g[0] + g[1]).abs() < 1e-15);
    }
}
