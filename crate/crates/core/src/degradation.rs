//! HR -> LR degradation: antialiased bicubic downscaling followed by
//! additive white Gaussian noise at a given PSNR level.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const KEYS_A: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub scale: usize,
    pub noise_psnr_db: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(seed: u64) -> Self {
        DegradationSpec {
            scale: 4,
            noise_psnr_db: 40.0,
            seed,
        }
    }

    /// Noise standard deviation on the 0-255 scale.
    pub fn sigma_255(&self) -> f64 {
        255.0 * 10f64.powf(-self.noise_psnr_db / 20.0)
    }

    /// Noise standard deviation in `[0, 1]` units.
    pub fn sigma_unit(&self) -> f64 {
        self.sigma_255() / 255.0
    }

    pub fn with_seed(self, seed: u64) -> Self {
        DegradationSpec { seed, ..self }
    }
}

/// Keys cubic convolution kernel.
pub fn keys_cubic(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Contributions of input samples to one output sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    /// Input indices after edge clamping.
    pub indices: Vec<usize>,
    /// Normalized weights (sum to 1).
    pub weights: Vec<f64>,
    /// Position of the largest weight.
    pub anchor: usize,
}

impl Taps {
    /// Weighted sum written as `x[anchor] + sum w * (x - x[anchor])`, which
    /// equals the plain sum for normalized weights but returns a constant
    /// signal bit for bit.
    fn apply(&self, x: impl Fn(usize) -> f64) -> f64 {
        let anchor = x(self.indices[self.anchor]);
        anchor
            + self
                .indices
                .iter()
                .zip(&self.weights)
                .map(|(&j, &w)| w * (x(j) - anchor))
                .sum::<f64>()
    }
}

/// 1-d resampling taps for `in_len -> out_len`. When shrinking, the kernel is
/// stretched by the inverse scale so it also acts as the antialiasing filter.
pub fn resize_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = out_len as f64 / in_len as f64;
    let kernel_scale = scale.min(1.0);
    let support = 2.0 / kernel_scale;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut indices = Vec::new();
            let mut weights = Vec::new();
            for j in lo..=hi {
                let w = keys_cubic((center - j as f64) * kernel_scale);
                if w != 0.0 {
                    indices.push(j.clamp(0, in_len as i64 - 1) as usize);
                    weights.push(w);
                }
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let anchor = (0..weights.len())
                .max_by(|&a, &b| weights[a].total_cmp(&weights[b]))
                .expect("at least one tap");
            Taps { indices, weights, anchor }
        })
        .collect()
}

/// Separable bicubic resize of a `[C, H, W]` image (rows first, then columns).
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [c, h, w] = img.dims3()?;
    if out_h == 0 || out_w == 0 {
        bail!(Dimension, "resize target must be at least 1x1, got {out_h}x{out_w}");
    }
    let col_taps = resize_taps(w, out_w);
    let row_taps = resize_taps(h, out_h);
    let src = img.data();

    // horizontal pass: [c, h, out_w]
    let mut tmp = vec![0.0f64; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut tmp[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (d, taps) in dst.iter_mut().zip(&col_taps) {
                *d = taps.apply(|j| row[j].as_f64());
            }
        }
    }
    // vertical pass
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &tmp[ch * h * out_w..(ch + 1) * h * out_w];
        for taps in &row_taps {
            for x in 0..out_w {
                out.push(T::lit(taps.apply(|j| plane[j * out_w + x])));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Adds N(0, sigma^2) noise (sigma from the PSNR level) and clamps to `[0, 1]`.
pub fn add_awgn<T: Scalar>(img: &Tensor<T>, spec: &DegradationSpec) -> Tensor<T> {
    let noisy = add_awgn_unclamped(img, spec);
    noisy.clamp01()
}

/// [`add_awgn`] without the final clamp.
pub fn add_awgn_unclamped<T: Scalar>(img: &Tensor<T>, spec: &DegradationSpec) -> Tensor<T> {
    let sigma = spec.sigma_unit();
    if sigma == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut rng = rng::stream(spec.seed, &[0xA5A5]);
    let data = img
        .data()
        .iter()
        .map(|&v| T::lit(v.as_f64() + normal.sample(&mut rng)))
        .collect();
    Tensor::new(img.shape(), data).expect("same shape")
}

/// `add_awgn(bicubic_resize(hr, H/scale, W/scale))`.
pub fn degrade<T: Scalar>(hr: &Tensor<T>, spec: &DegradationSpec) -> Result<Tensor<T>> {
    let [_, h, w] = hr.dims3()?;
    if spec.scale == 0 || h % spec.scale != 0 || w % spec.scale != 0 {
        bail!(
            Data,
            "HR size {h}x{w} is not divisible by the scale factor {}",
            spec.scale
        );
    }
    let lr = bicubic_resize(hr, h / spec.scale, w / spec.scale)?;
    Ok(add_awgn(&lr, spec))
}
