//! Forward and backward kernels on plain tensors.
//!
//! These do not record anything; [`Tape`](super::Tape) wraps them for
//! training and inference code calls them directly.

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of one 2-d convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        pad: usize,
        stride: usize,
    ) -> Result<Self> {
        let [batch, in_channels, height, width] = input.dims4()?;
        let [out_channels, w_in, kernel_h, kernel_w] = weight.dims4()?;
        if w_in != in_channels {
            bail!(
                Dimension,
                "conv2d weight expects {w_in} input channels, input has {in_channels}"
            );
        }
        if let Some(b) = bias {
            if b.shape() != [out_channels] {
                bail!(
                    Dimension,
                    "conv2d bias shape {:?}, expected [{out_channels}]",
                    b.shape()
                );
            }
        }
        if stride == 0 {
            bail!(Dimension, "conv2d stride must be at least 1");
        }
        if height + 2 * pad < kernel_h || width + 2 * pad < kernel_w {
            bail!(
                Dimension,
                "conv2d kernel {kernel_h}x{kernel_w} larger than padded input {}x{}",
                height + 2 * pad,
                width + 2 * pad
            );
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel_h,
            kernel_w,
            pad,
            stride,
            out_h: (height + 2 * pad - kernel_h) / stride + 1,
            out_w: (width + 2 * pad - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    /// Valid output-column range for kernel column `kj` (stride 1 fast path).
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).min(self.out_w);
        let hi = (self.width + self.pad).saturating_sub(kj).min(self.out_w);
        (lo, hi.max(lo))
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, src: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &src[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                row += 1;
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kj);
                        out_row[..lo].iter_mut().for_each(|v| *v = T::zero());
                        out_row[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            out_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= g.width as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dst: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &mut dst[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * plane..(row + 1) * plane];
                row += 1;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let in_row = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let col_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kj);
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            for (d, s) in in_row[start..start + hi - lo].iter_mut().zip(&col_row[lo..hi]) {
                                *d += *s;
                            }
                        }
                    } else {
                        for (ox, s) in col_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                in_row[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-d cross-correlation over an NCHW batch.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weight, bias, pad, stride)?;
    let k = g.patch_len();
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let mut cols = vec![T::zero(); k * plane];
    let in_len = g.in_channels * g.in_plane();
    let out_len = g.out_channels * plane;
    for n in 0..g.batch {
        im2col(&g, &input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        T::gemm(g.out_channels, k, plane, weight.data(), false, &cols, false, dst, false);
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[g.batch, g.out_channels, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to input (when requested), weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: usize,
    stride: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input, weight, None, pad, stride)?;
    if grad_out.shape() != [g.batch, g.out_channels, g.out_h, g.out_w] {
        bail!(Dimension, "conv2d upstream gradient shape {:?}", grad_out.shape());
    }
    let k = g.patch_len();
    let plane = g.out_plane();
    let in_len = g.in_channels * g.in_plane();
    let out_len = g.out_channels * plane;
    let mut cols = vec![T::zero(); k * plane];
    let mut gcols = vec![T::zero(); if need_input { k * plane } else { 0 }];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.out_channels];
    let mut gin = vec![T::zero(); if need_input { input.len() } else { 0 }];
    for n in 0..g.batch {
        let go = &grad_out.data()[n * out_len..(n + 1) * out_len];
        im2col(&g, &input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        T::gemm(g.out_channels, plane, k, go, false, &cols, true, &mut gw, true);
        for (co, chunk) in go.chunks(plane).enumerate() {
            gb[co] += chunk.iter().fold(T::zero(), |s, &v| s + v);
        }
        if need_input {
            T::gemm(k, g.out_channels, plane, weight.data(), true, go, false, &mut gcols, false);
            col2im(&g, &gcols, &mut gin[n * in_len..(n + 1) * in_len]);
        }
    }
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(input.shape(), gin)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[g.out_channels], gb)?,
    })
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Passes the upstream gradient where the input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(input, grad_out, "relu backward")?;
    Tensor::new(
        input.shape(),
        input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
    )
}

/// `[n, c*r*r, h, w] -> [n, c, h*r, w*r]`.
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, cin, h, w] = input.dims4()?;
    if r == 0 || cin % (r * r) != 0 {
        bail!(Dimension, "pixel_shuffle: {cin} channels not divisible by {r}^2");
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); input.len()];
    let src = input.data();
    for b in 0..n {
        for co in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    let plane = &src[((b * cin + ci) * h) * w..((b * cin + ci) * h + h) * w];
                    for y in 0..h {
                        let dst_row = ((b * c + co) * oh + y * r + i) * ow;
                        for x in 0..w {
                            out[dst_row + x * r + j] = plane[y * w + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// `[n, c, h*r, w*r] -> [n, c*r*r, h, w]`, the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, ih, iw] = input.dims4()?;
    if r == 0 || ih % r != 0 || iw % r != 0 {
        bail!(Dimension, "pixel_unshuffle: {ih}x{iw} not divisible by {r}");
    }
    let (h, w) = (ih / r, iw / r);
    let cout = c * r * r;
    let mut out = vec![T::zero(); input.len()];
    let src = input.data();
    for b in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let co = ci * r * r + i * r + j;
                    let dst = ((b * cout + co) * h) * w;
                    for y in 0..h {
                        let src_row = ((b * c + ci) * ih + y * r + i) * iw;
                        for x in 0..w {
                            out[dst + y * w + x] = src[src_row + x * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, h, w], out)
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = inputs.first() else {
        bail!(Usage, "concat of zero tensors");
    };
    let [n, _, h, w] = first.dims4()?;
    let mut total_c = 0;
    for t in inputs {
        let [tn, tc, th, tw] = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            bail!(Dimension, "concat of {:?} and {:?}", first.shape(), t.shape());
        }
        total_c += tc;
    }
    let mut out = Vec::with_capacity(n * total_c * h * w);
    for b in 0..n {
        for t in inputs {
            let per = t.len() / n;
            out.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::new(&[n, total_c, h, w], out)
}

/// Splits a channel-concatenated gradient back into pieces of the given channel counts.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = grad.dims4()?;
    if channels.iter().sum::<usize>() != c {
        bail!(Dimension, "split of {c} channels into {:?}", channels);
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&k| Vec::with_capacity(n * k * plane)).collect();
    for b in 0..n {
        let mut offset = (b * c) * plane;
        for (part, &k) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad.data()[offset..offset + k * plane]);
            offset += k * plane;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &k)| Tensor::new(&[n, k, h, w], data))
        .collect()
}

/// Elementwise `((x0 + x1) + ... ) / len`.
pub fn mean_of<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = inputs.first() else {
        bail!(Usage, "mean of zero tensors");
    };
    let mut acc = first.data().to_vec();
    for t in &inputs[1..] {
        same_shape(first, t, "mean")?;
        for (a, b) in acc.iter_mut().zip(t.data()) {
            *a += *b;
        }
    }
    let count = T::lit(inputs.len() as f64);
    acc.iter_mut().for_each(|a| *a /= count);
    Tensor::new(first.shape(), acc)
}

/// `a + scale * b`.
pub fn add_scaled<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x + scale * y).collect(),
    )
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape(pred, target, "l1_loss")?;
    let sum = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |s, (&p, &t)| s + (p - t).abs());
    Ok(sum / T::lit(pred.len() as f64))
}

pub fn l1_loss_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Result<Tensor<T>> {
    same_shape(pred, target, "l1_loss")?;
    let scale = upstream / T::lit(pred.len() as f64);
    Tensor::new(
        pred.shape(),
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                if p > t {
                    scale
                } else if p < t {
                    -scale
                } else {
                    T::zero()
                }
            })
            .collect(),
    )
}

/// Mean squared error.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape(pred, target, "mse_loss")?;
    let sum = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |s, (&p, &t)| s + (p - t) * (p - t));
    Ok(sum / T::lit(pred.len() as f64))
}

pub fn mse_loss_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Result<Tensor<T>> {
    same_shape(pred, target, "mse_loss")?;
    let scale = T::lit(2.0) * upstream / T::lit(pred.len() as f64);
    Tensor::new(
        pred.shape(),
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| scale * (p - t))
            .collect(),
    )
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{what}: shape {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}
