//! Forward and backward kernels for the spatial operations. These work on raw
//! tensors; [`super::Tape`] wires them into the gradient graph.

use super::Tensor;
use crate::error::{Error, Result};

/// Lower bound on a row norm before division.
pub const NORM_EPS: f64 = 1e-12;

/// Geometry of a (possibly grouped) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn infer(
        input: &[usize],
        weight: &[usize],
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if groups == 0 || stride == 0 {
            return Err(Error::config("groups and stride must be positive"));
        }
        let &[batch, in_channels, in_h, in_w] = input else {
            return Err(Error::shape(format!("conv2d input must be rank 4, got {input:?}")));
        };
        let &[out_channels, per_group, kh, kw] = weight else {
            return Err(Error::shape(format!("conv2d weight must be rank 4, got {weight:?}")));
        };
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::config(format!(
                "channels {in_channels}->{out_channels} not divisible by {groups} groups"
            )));
        }
        if per_group != in_channels / groups {
            return Err(Error::shape(format!(
                "weight expects {per_group} input channels per group, input provides {}",
                in_channels / groups
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("only square kernels are supported, got {kh}x{kw}")));
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "kernel {kh} larger than padded input {in_h}x{in_w}"
            )));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            in_h,
            in_w,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
            kernel: kh,
            stride,
            padding,
            groups,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Output positions `o` whose tap `k` lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // need o*s + k >= p and o*s + k - p < extent
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if extent + p <= k { 0 } else { (extent + p - k - 1) / s + 1 };
        (lo.min(out_extent), hi.min(out_extent))
    }
}

/// Unrolled input patches of one sample and group: row `(ic*k + kh)*k + kw`
/// holds the input value each output position sees through that tap
/// (zero where it falls into padding).
fn im2col(x: &[f64], g: &ConvGeometry, n: usize, grp: usize, col: &mut [f64]) {
    let cin_g = g.in_channels / g.groups;
    let k = g.kernel;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    if g.padding > 0 {
        col.fill(0.0);
    }
    for icl in 0..cin_g {
        let src = &x[(n * g.in_channels + grp * cin_g + icl) * in_plane..][..in_plane];
        for kh in 0..k {
            let (oh_lo, oh_hi) = g.valid_range(kh, g.in_h, g.out_h);
            for kw in 0..k {
                let (ow_lo, ow_hi) = g.valid_range(kw, g.in_w, g.out_w);
                let dst = &mut col[((icl * k + kh) * k + kw) * out_plane..][..out_plane];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.padding;
                    let srow = &src[ih * g.in_w..][..g.in_w];
                    let drow = &mut dst[oh * g.out_w..][..g.out_w];
                    for ow in ow_lo..ow_hi {
                        drow[ow] = srow[ow * g.stride + kw - g.padding];
                    }
                }
            }
        }
    }
}

/// Scatter-add of [`im2col`]'s adjoint.
fn col2im_add(col: &[f64], g: &ConvGeometry, n: usize, grp: usize, gx: &mut [f64]) {
    let cin_g = g.in_channels / g.groups;
    let k = g.kernel;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for icl in 0..cin_g {
        let dst = &mut gx[(n * g.in_channels + grp * cin_g + icl) * in_plane..][..in_plane];
        for kh in 0..k {
            let (oh_lo, oh_hi) = g.valid_range(kh, g.in_h, g.out_h);
            for kw in 0..k {
                let (ow_lo, ow_hi) = g.valid_range(kw, g.in_w, g.out_w);
                let src = &col[((icl * k + kh) * k + kw) * out_plane..][..out_plane];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.padding;
                    for ow in ow_lo..ow_hi {
                        dst[ih * g.in_w + ow * g.stride + kw - g.padding] += src[oh * g.out_w + ow];
                    }
                }
            }
        }
    }
}

impl ConvGeometry {
    /// A 1x1, stride-1, unpadded convolution reads its input planes directly.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: &ConvGeometry,
) -> Tensor {
    let g = geo;
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let taps = cin_g * g.kernel * g.kernel;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; g.batch * g.out_channels * out_plane];
    let mut scratch = if g.is_pointwise() { Vec::new() } else { vec![0.0; taps * out_plane] };

    for n in 0..g.batch {
        for grp in 0..g.groups {
            let col: &[f64] = if g.is_pointwise() {
                &x[(n * g.in_channels + grp * cin_g) * in_plane..][..taps * in_plane]
            } else {
                im2col(x, g, n, grp, &mut scratch);
                &scratch
            };
            for oc in grp * cout_g..(grp + 1) * cout_g {
                let dst = &mut out[(n * g.out_channels + oc) * out_plane..][..out_plane];
                if let Some(b) = bias {
                    dst.fill(b.data()[oc]);
                }
                for (r, &wv) in w[oc * taps..(oc + 1) * taps].iter().enumerate() {
                    for (d, s) in dst.iter_mut().zip(&col[r * out_plane..(r + 1) * out_plane]) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
    Tensor::new(geo.output_shape().to_vec(), out).expect("conv output shape")
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geo: &ConvGeometry,
    want_input: bool,
) -> ConvGrads {
    let g = geo;
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let taps = cin_g * g.kernel * g.kernel;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();
    let mut gx = if want_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_channels];
    let mut scratch = if g.is_pointwise() { Vec::new() } else { vec![0.0; taps * out_plane] };
    let mut gcol = if want_input { vec![0.0; taps * out_plane] } else { Vec::new() };

    for n in 0..g.batch {
        for grp in 0..g.groups {
            let base = (n * g.in_channels + grp * cin_g) * in_plane;
            let col: &[f64] = if g.is_pointwise() {
                &x[base..][..taps * in_plane]
            } else {
                im2col(x, g, n, grp, &mut scratch);
                &scratch
            };
            gcol.fill(0.0);
            for oc in grp * cout_g..(grp + 1) * cout_g {
                let gsrc = &go[(n * g.out_channels + oc) * out_plane..][..out_plane];
                gb[oc] += gsrc.iter().sum::<f64>();
                for r in 0..taps {
                    let crow = &col[r * out_plane..(r + 1) * out_plane];
                    gw[oc * taps + r] += super::dot(gsrc, crow);
                    if want_input {
                        let wv = w[oc * taps + r];
                        for (d, gv) in gcol[r * out_plane..(r + 1) * out_plane].iter_mut().zip(gsrc) {
                            *d += wv * gv;
                        }
                    }
                }
            }
            if want_input {
                if g.is_pointwise() {
                    for (d, s) in gx[base..][..taps * in_plane].iter_mut().zip(&gcol) {
                        *d += s;
                    }
                } else {
                    col2im_add(&gcol, g, n, grp, &mut gx);
                }
            }
        }
    }
    ConvGrads {
        input: want_input.then(|| Tensor::new(input.shape().to_vec(), gx).expect("grad shape")),
        weight: Tensor::new(weight.shape().to_vec(), gw).expect("grad shape"),
        bias: Tensor::new(vec![g.out_channels], gb).expect("grad shape"),
    }
}

/// Max pooling with square window; returns output and flat argmax indices.
pub fn max_pool2d_forward(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::shape(format!("max_pool2d needs rank 4, got {:?}", input.shape())));
    };
    if kernel == 0 || stride == 0 || padding >= kernel || h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(Error::config(format!(
            "invalid pooling window k={kernel} s={stride} p={padding} on {h}x{w}"
        )));
    }
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for di in 0..kernel {
                    let r = (i * stride + di) as isize - padding as isize;
                    if r < 0 || r as usize >= h {
                        continue;
                    }
                    for dj in 0..kernel {
                        let col = (j * stride + dj) as isize - padding as isize;
                        if col < 0 || col as usize >= w {
                            continue;
                        }
                        let idx = base + r as usize * w + col as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

/// Per-channel statistics saved by a training-mode batch norm.
pub struct BatchNormSaved {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn batch_norm_train_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormSaved)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::shape(format!("batchnorm2d needs rank 4, got {:?}", input.shape())));
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!("batchnorm2d affine params must be [{c}]")));
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        mean[ch] = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|t| (t - mean[ch]).powi(2))
                .sum::<f64>();
        }
        var[ch] = v / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormSaved { normalized, inv_std, mean, var },
    ))
}

/// Returns (grad_input, grad_gamma, grad_beta).
pub fn batch_norm_train_backward(
    shape: &[usize],
    gamma: &Tensor,
    saved: &BatchNormSaved,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * plane) as f64;
    let go = grad_out.data();
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                g_beta[ch] += go[i];
                g_gamma[ch] += go[i] * saved.normalized[i];
            }
        }
    }
    let mut gx = vec![0.0; go.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * saved.inv_std[ch] / count;
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                gx[i] = scale * (count * go[i] - g_beta[ch] - saved.normalized[i] * g_gamma[ch]);
            }
        }
    }
    (
        Tensor::new(shape.to_vec(), gx).expect("grad shape"),
        Tensor::new(vec![c], g_gamma).expect("grad shape"),
        Tensor::new(vec![c], g_beta).expect("grad shape"),
    )
}
