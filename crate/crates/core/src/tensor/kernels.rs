//! Numeric kernels shared by the tape and the reference paths.
//!
//! Layouts: matrices are `[rows, cols]`; images are `[batch, channels,
//! height, width]`. Channel-wise kernels treat axis 1 as the channel axis
//! for any tensor of rank ≥ 2.

use super::dense::{numel, Tensor};
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_raw(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::shape("transpose", &[0, 0], s));
    }
    let (m, n) = (s[0], s[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_raw(vec![n, m], out))
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("channel op", &[0, 0], shape));
    }
    Ok((shape[0], shape[1], numel(&shape[2..])))
}

/// `x[n, c, ...] * s[c]`.
pub fn channel_scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (n, c, inner) = channel_layout(x.shape())?;
    if s.shape() != [c] {
        return Err(Error::shape("channel_scale", &[c], s.shape()));
    }
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let f = s.data()[ch];
            out[base..base + inner].iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// `x[n, c, ...] + b[c]`.
pub fn channel_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, inner) = channel_layout(x.shape())?;
    if b.shape() != [c] {
        return Err(Error::shape("channel_add", &[c], b.shape()));
    }
    let mut out = x.data().to_vec();
    for bi in 0..n {
        for ch in 0..c {
            let base = (bi * c + ch) * inner;
            let f = b.data()[ch];
            out[base..base + inner].iter_mut().for_each(|v| *v += f);
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// Sums everything except the channel axis: `[n, c, ...] -> [c]`.
pub fn channel_sum(x: &Tensor) -> Result<Tensor> {
    let (n, c, inner) = channel_layout(x.shape())?;
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (b * c + ch) * inner;
            *o += x.data()[base..base + inner].iter().sum::<f64>();
        }
    }
    Ok(Tensor::from_raw(vec![c], out))
}

/// Broadcasts `[c]` to `shape = [n, c, ...]`.
pub fn channel_expand(v: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let (n, c, inner) = channel_layout(shape)?;
    if v.shape() != [c] {
        return Err(Error::shape("channel_expand", &[c], v.shape()));
    }
    let mut out = Vec::with_capacity(n * c * inner);
    for _ in 0..n {
        for &val in v.data() {
            out.extend(std::iter::repeat_n(val, inner));
        }
    }
    Ok(Tensor::from_raw(shape.to_vec(), out))
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, inner) = channel_layout(x.shape())?;
    let count = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            s += x.data()[base..base + inner].iter().sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            q += x.data()[base..base + inner]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    Ok((mean, var))
}

/// Row sums of a matrix: `[m, n] -> [m]`.
pub fn row_sum(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("row_sum", &[0, 0], s));
    }
    let n = s[1];
    let out = x.data().chunks(n.max(1)).map(|r| r.iter().sum()).take(s[0]).collect();
    Ok(Tensor::from_raw(vec![s[0]], out))
}

/// Repeats `[m]` along a new trailing axis: `[m] -> [m, n]`.
pub fn expand_cols(v: &Tensor, n: usize) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(Error::shape("expand_cols", &[0], v.shape()));
    }
    let m = v.shape()[0];
    let mut out = Vec::with_capacity(m * n);
    for &val in v.data() {
        out.extend(std::iter::repeat_n(val, n));
    }
    Ok(Tensor::from_raw(vec![m, n], out))
}

/// Row-wise log-softmax with max shift.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::shape("log_softmax", &[0, 1], s));
    }
    let n = s[1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Ok(Tensor::from_raw(s.to_vec(), out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

pub fn conv_output_hw(h: usize, w: usize, k: usize, g: ConvGeometry) -> Result<(usize, usize)> {
    if g.stride == 0 || h + 2 * g.padding < k || w + 2 * g.padding < k {
        return Err(Error::invalid(format!(
            "conv kernel {k} with stride {} padding {} does not fit {h}x{w}",
            g.stride, g.padding
        )));
    }
    Ok(((h + 2 * g.padding - k) / g.stride + 1, (w + 2 * g.padding - k) / g.stride + 1))
}

fn conv_dims(x: &[usize], w: &[usize]) -> Result<[usize; 6]> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] {
        return Err(Error::shape("conv2d", w, x));
    }
    Ok([x[0], x[1], x[2], x[3], w[0], w[2]])
}

/// Cross-correlation without bias.
pub fn conv2d(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let [n, c, h, wd, o, k] = conv_dims(x.shape(), w.shape())?;
    let (ho, wo) = conv_output_hw(h, wd, k, g)?;
    let (xd, wdta) = (x.data(), w.data());
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * wdta[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![n, o, ho, wo], out))
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_input_grad(
    grad: &Tensor,
    w: &Tensor,
    input_shape: &[usize],
    g: ConvGeometry,
) -> Result<Tensor> {
    let [n, c, h, wd, o, k] = conv_dims(input_shape, w.shape())?;
    let (ho, wo) = conv_output_hw(h, wd, k, g)?;
    if grad.shape() != [n, o, ho, wo] {
        return Err(Error::shape("conv2d_input_grad", &[n, o, ho, wo], grad.shape()));
    }
    let (gd, wdta) = (grad.data(), w.data());
    let mut out = vec![0.0; n * c * h * wd];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = gd[((b * o + oc) * ho + oy) * wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ic in 0..c {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                out[((b * c + ic) * h + iy as usize) * wd + ix as usize] +=
                                    gv * wdta[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(input_shape.to_vec(), out))
}

/// Gradient of `conv2d` with respect to its kernel.
pub fn conv2d_weight_grad(
    grad: &Tensor,
    x: &Tensor,
    weight_shape: &[usize],
    g: ConvGeometry,
) -> Result<Tensor> {
    let [n, c, h, wd, o, k] = conv_dims(x.shape(), weight_shape)?;
    let (ho, wo) = conv_output_hw(h, wd, k, g)?;
    if grad.shape() != [n, o, ho, wo] {
        return Err(Error::shape("conv2d_weight_grad", &[n, o, ho, wo], grad.shape()));
    }
    let (gd, xd) = (grad.data(), x.data());
    let mut out = vec![0.0; o * c * k * k];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = gd[((b * o + oc) * ho + oy) * wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ic in 0..c {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                out[((oc * c + ic) * k + ky) * k + kx] +=
                                    gv * xd[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(weight_shape.to_vec(), out))
}

pub fn pool_output_hw(h: usize, w: usize, window: [usize; 2], stride: [usize; 2]) -> Result<(usize, usize)> {
    if window.contains(&0) || stride.contains(&0) {
        return Err(Error::invalid("maxpool window and stride must be positive"));
    }
    if h < window[0] || w < window[1] {
        return Err(Error::invalid(format!("maxpool window {window:?} larger than {h}x{w}")));
    }
    Ok(((h - window[0]) / stride[0] + 1, (w - window[1]) / stride[1] + 1))
}

/// Max pooling without padding. Returns the pooled values and, for every
/// output cell, the flat input index of the winner (first maximum in scan
/// order).
pub fn maxpool2d(x: &Tensor, window: [usize; 2], stride: [usize; 2]) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("maxpool2d", &[0, 0, 0, 0], s));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = pool_output_hw(h, w, window, stride)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..window[0] {
                    for kx in 0..window[1] {
                        let i = base + (oy * stride[0] + ky) * w + ox * stride[1] + kx;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_raw(vec![n, c, ho, wo], out), arg))
}

pub fn maxpool2d_grad(grad: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad.len() != argmax.len() {
        return Err(Error::shape("maxpool2d_grad", &[argmax.len()], grad.shape()));
    }
    let mut out = vec![0.0; numel(input_shape)];
    for (&g, &i) in grad.data().iter().zip(argmax) {
        out[i] += g;
    }
    Ok(Tensor::from_raw(input_shape.to_vec(), out))
}
