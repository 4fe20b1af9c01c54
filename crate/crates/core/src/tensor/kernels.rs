//! Forward and backward kernels on raw row-major buffers.
//!
//! All loops accumulate sequentially in a fixed order, so results are
//! bit-reproducible for a given input.

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = input.dims4("conv2d")?;
        let [k, kc, kh, kw] = kernel.dims4("conv2d")?;
        if kc != c {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "channel",
                expected: c,
                found: kc,
            });
        }
        if bias.numel() != k {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "bias",
                expected: k,
                found: bias.numel(),
            });
        }
        if stride == 0 {
            return Err(Error::validation("conv2d: stride must be >= 1"));
        }
        if kh > h + 2 * padding {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "height",
                expected: h + 2 * padding,
                found: kh,
            });
        }
        if kw > w + 2 * padding {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "width",
                expected: w + 2 * padding,
                found: kw,
            });
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: k,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Output positions `o` along one axis whose source index
    /// `o * stride + tap - padding` lands inside `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let offset = tap as isize - self.padding as isize;
        // smallest o with o*s + offset >= 0
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        // largest o with o*s + offset <= extent - 1
        let last = extent as isize - 1 - offset;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        (lo.max(0) as usize, (hi as usize).min(out_extent))
    }
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f32], kernel: &[f32], bias: &[f32]) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.height, g.width);
    let mut out = vec![0.0f32; g.batch * g.out_channels * oh * ow];
    for n in 0..g.batch {
        for k in 0..g.out_channels {
            let plane = &mut out[(n * g.out_channels + k) * oh * ow..][..oh * ow];
            plane.fill(bias[k]);
            for c in 0..g.in_channels {
                let src = &input[(n * g.in_channels + c) * h * w..][..h * w];
                for ky in 0..g.kernel_h {
                    let (oy_lo, oy_hi) = g.valid_range(ky, h, oh);
                    for kx in 0..g.kernel_w {
                        let wv = kernel[((k * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                        let (ox_lo, ox_hi) = g.valid_range(kx, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row = &src[iy * w..][..w];
                            let dst = &mut plane[oy * ow..][..ow];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.padding;
                                let len = ox_hi - ox_lo;
                                for (d, s) in dst[ox_lo..ox_hi].iter_mut().zip(&row[ix0..ix0 + len]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    dst[ox] += wv * row[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    want: [bool; 3],
) -> ConvGrads {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.height, g.width);
    let mut gi = want[0].then(|| vec![0.0f32; input.len()]);
    let mut gk = want[1].then(|| vec![0.0f32; kernel.len()]);
    let mut gb = want[2].then(|| vec![0.0f32; g.out_channels]);

    for n in 0..g.batch {
        for k in 0..g.out_channels {
            let go = &grad_out[(n * g.out_channels + k) * oh * ow..][..oh * ow];
            if let Some(gb) = gb.as_mut() {
                gb[k] += go.iter().sum::<f32>();
            }
            for c in 0..g.in_channels {
                let base = (n * g.in_channels + c) * h * w;
                for ky in 0..g.kernel_h {
                    let (oy_lo, oy_hi) = g.valid_range(ky, h, oh);
                    for kx in 0..g.kernel_w {
                        let kidx = ((k * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                        let (ox_lo, ox_hi) = g.valid_range(kx, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = kernel[kidx];
                        let mut acc = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let go_row = &go[oy * ow..][..ow];
                            if let Some(gi) = gi.as_mut() {
                                let gi_row = &mut gi[base + iy * w..][..w];
                                for ox in ox_lo..ox_hi {
                                    gi_row[ox * g.stride + kx - g.padding] += wv * go_row[ox];
                                }
                            }
                            if gk.is_some() {
                                let in_row = &input[base + iy * w..][..w];
                                for ox in ox_lo..ox_hi {
                                    acc += go_row[ox] * in_row[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gi,
        kernel: gk,
        bias: gb,
    }
}

/// Non-overlapping `size x size` mean pooling; trailing rows/columns that do
/// not fill a window are dropped.
pub fn avgpool2d_forward(dims: [usize; 4], size: usize, input: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f32;
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for dy in 0..size {
                    for dx in 0..size {
                        acc += src[(oy * size + dy) * w + ox * size + dx];
                    }
                }
                dst[oy * ow + ox] = acc * scale;
            }
        }
    }
    out
}

pub fn avgpool2d_backward(dims: [usize; 4], size: usize, grad_out: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f32;
    let mut gi = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        let go = &grad_out[p * oh * ow..][..oh * ow];
        let dst = &mut gi[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = go[oy * ow + ox] * scale;
                for dy in 0..size {
                    for dx in 0..size {
                        dst[(oy * size + dy) * w + ox * size + dx] = v;
                    }
                }
            }
        }
    }
    gi
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avgpool_forward(dims: [usize; 4], input: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let scale = 1.0 / hw as f32;
    (0..n * c)
        .map(|p| input[p * hw..][..hw].iter().sum::<f32>() * scale)
        .collect()
}

pub fn global_avgpool_backward(dims: [usize; 4], grad_out: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let scale = 1.0 / hw as f32;
    let mut gi = vec![0.0f32; n * c * hw];
    for p in 0..n * c {
        gi[p * hw..][..hw].fill(grad_out[p] * scale);
    }
    gi
}

/// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`.
pub fn linear_forward(n: usize, fan_in: usize, fan_out: usize, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0f32; n * fan_out];
    for i in 0..n {
        let xi = &x[i * fan_in..][..fan_in];
        for o in 0..fan_out {
            let wo = &w[o * fan_in..][..fan_in];
            let mut acc = b[o];
            for (a, bb) in xi.iter().zip(wo) {
                acc += a * bb;
            }
            y[i * fan_out + o] = acc;
        }
    }
    y
}

pub struct LinearGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn linear_backward(
    n: usize,
    fan_in: usize,
    fan_out: usize,
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    want: [bool; 3],
) -> LinearGrads {
    let mut gx = want[0].then(|| vec![0.0f32; n * fan_in]);
    let mut gw = want[1].then(|| vec![0.0f32; fan_out * fan_in]);
    let mut gb = want[2].then(|| vec![0.0f32; fan_out]);
    for i in 0..n {
        let xi = &x[i * fan_in..][..fan_in];
        for o in 0..fan_out {
            let g = grad_out[i * fan_out + o];
            if let Some(gb) = gb.as_mut() {
                gb[o] += g;
            }
            if let Some(gx) = gx.as_mut() {
                let row = &mut gx[i * fan_in..][..fan_in];
                for (d, wv) in row.iter_mut().zip(&w[o * fan_in..][..fan_in]) {
                    *d += g * wv;
                }
            }
            if let Some(gw) = gw.as_mut() {
                let row = &mut gw[o * fan_in..][..fan_in];
                for (d, xv) in row.iter_mut().zip(xi) {
                    *d += g * xv;
                }
            }
        }
    }
    LinearGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Channel concatenation of `[N, C1, H, W]` and `[N, C2, H, W]`.
pub fn concat_channels_forward(n: usize, c1: usize, c2: usize, hw: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * (c1 + c2) * hw);
    for i in 0..n {
        out.extend_from_slice(&a[i * c1 * hw..][..c1 * hw]);
        out.extend_from_slice(&b[i * c2 * hw..][..c2 * hw]);
    }
    out
}

pub fn concat_channels_backward(n: usize, c1: usize, c2: usize, hw: usize, grad_out: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut ga = Vec::with_capacity(n * c1 * hw);
    let mut gb = Vec::with_capacity(n * c2 * hw);
    for i in 0..n {
        let row = &grad_out[i * (c1 + c2) * hw..][..(c1 + c2) * hw];
        ga.extend_from_slice(&row[..c1 * hw]);
        gb.extend_from_slice(&row[c1 * hw..]);
    }
    (ga, gb)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(rows: usize, k: usize, logits: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * k];
    for r in 0..rows {
        let row = &logits[r * k..][..k];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let dst = &mut out[r * k..][..k];
        let mut sum = 0.0f32;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Per-row cross-entropy `-log softmax(logits)[label]`, computed with the
/// log-sum-exp shift so that large logits stay finite.
pub fn cross_entropy_rows(k: usize, logits: &[f32], labels: &[usize]) -> Vec<f32> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = &logits[r * k..][..k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
            lse - row[y]
        })
        .collect()
}

pub(crate) fn check_labels(k: usize, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy over a batch of logits `[N, K]`, returning the
/// loss and its gradient with respect to the logits, `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    let [n, k] = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            axis: "batch",
            expected: n,
            found: labels.len(),
        });
    }
    check_labels(k, labels)?;
    let losses = cross_entropy_rows(k, logits.data(), labels);
    let loss = losses.iter().sum::<f32>() / n as f32;
    let mut grad = softmax_rows(n, k, logits.data());
    for (r, &y) in labels.iter().enumerate() {
        grad[r * k + y] -= 1.0;
    }
    let inv = 1.0 / n as f32;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss, grad))
}
