//! Procedural two-class corpus: "text" pages and band-pass "texture", plus
//! mixed images that contain both.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{image_io, ClassDataset, ImagePair, Split};
use crate::degradation::{degrade, DegradationSpec};
use crate::error::{bail, Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthClass {
    /// Dark glyph strokes and boxes on a light page.
    Text,
    /// Band-pass filtered noise over a smooth gradient.
    Texture,
    /// Texture with rectangular text panels.
    Mixed,
}

impl SynthClass {
    pub fn label(self) -> &'static str {
        match self {
            SynthClass::Text => "text",
            SynthClass::Texture => "texture",
            SynthClass::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for SynthClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(SynthClass::Text),
            "texture" => Ok(SynthClass::Texture),
            "mixed" => Ok(SynthClass::Mixed),
            other => bail!(Usage, "unknown synthetic class {other:?} (text, texture, mixed)"),
        }
    }
}

/// Three `size x size` planes in `[0, 1]`.
struct Canvas {
    size: usize,
    planes: [Vec<f64>; 3],
}

impl Canvas {
    fn filled(size: usize, rgb: [f64; 3]) -> Self {
        Canvas {
            size,
            planes: rgb.map(|v| vec![v; size * size]),
        }
    }

    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [f64; 3]) {
        let s = self.size as i64;
        for y in y0.max(0)..y1.min(s) {
            for x in x0.max(0)..x1.min(s) {
                let i = (y * s + x) as usize;
                for c in 0..3 {
                    self.planes[c][i] = rgb[c];
                }
            }
        }
    }

    /// Stroke from `(xa, ya)` to `(xb, yb)` with square pen of `thick` pixels.
    fn line(&mut self, xa: f64, ya: f64, xb: f64, yb: f64, thick: i64, rgb: [f64; 3]) {
        let steps = ((xb - xa).abs().max((yb - ya).abs()).ceil() as usize).max(1);
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let x = (xa + t * (xb - xa)).round() as i64;
            let y = (ya + t * (yb - ya)).round() as i64;
            self.fill_rect(x, y, x + thick, y + thick, rgb);
        }
    }

    fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        let data = self
            .planes
            .into_iter()
            .flatten()
            .map(|v| image_io::dequantize_u8::<T>(image_io::quantize_u8(v)))
            .collect();
        Tensor::new(&[3, self.size, self.size], data).expect("3 planes")
    }
}

fn render_glyph(canvas: &mut Canvas, rng: &mut ChaCha8Rng, x0: f64, y0: f64, gw: f64, gh: f64, thick: i64, ink: [f64; 3]) {
    let t = thick as f64;
    let (x1, y1) = (x0 + gw - t, y0 + gh - t);
    let xm = x0 + (gw - t) / 2.0;
    let ym = y0 + (gh - t) / 2.0;
    let strokes = rng.random_range(2..=4);
    for _ in 0..strokes {
        match rng.random_range(0..9) {
            0 => canvas.line(x0, y0, x0, y1, thick, ink),
            1 => canvas.line(x1, y0, x1, y1, thick, ink),
            2 => canvas.line(xm, y0, xm, y1, thick, ink),
            3 => canvas.line(x0, y0, x1, y0, thick, ink),
            4 => canvas.line(x0, ym, x1, ym, thick, ink),
            5 => canvas.line(x0, y1, x1, y1, thick, ink),
            6 => canvas.line(x0, y0, x1, y1, thick, ink),
            7 => canvas.line(x0, y1, x1, y0, thick, ink),
            _ => canvas.line(x0, ym, xm, y1, thick, ink),
        }
    }
}

/// Lines of glyph "words" inside the rectangle, with the occasional rule or box.
fn render_text(canvas: &mut Canvas, rng: &mut ChaCha8Rng, rect: (i64, i64, i64, i64), ink: [f64; 3]) {
    let (rx0, ry0, rx1, ry1) = rect;
    // strokes stay at least about one LR pixel wide at x4
    let line_h = rng.random_range(40..=60) as f64;
    let glyph_h = (line_h * rng.random_range(0.6..0.75)).round();
    let glyph_w = (glyph_h * rng.random_range(0.5..0.7)).round().max(3.0);
    let thick = ((glyph_h / 5.0).round() as i64).clamp(5, 9);
    let gap = (glyph_w * 0.3).ceil();
    let margin = rng.random_range(2..8) as f64;
    let mut y = ry0 as f64 + margin;
    while y + glyph_h < ry1 as f64 - 1.0 {
        let roll: f64 = rng.random();
        if roll < 0.06 {
            // horizontal rule
            canvas.fill_rect(rx0 + margin as i64, y as i64, rx1 - margin as i64, y as i64 + thick, ink);
        } else if roll < 0.1 {
            // framed box
            let bx0 = rx0 as f64 + margin + rng.random_range(0.0..20.0);
            let bx1 = (bx0 + rng.random_range(20.0..60.0)).min(rx1 as f64 - margin);
            let by1 = (y + glyph_h * 2.0).min(ry1 as f64 - 1.0);
            canvas.line(bx0, y, bx1, y, thick, ink);
            canvas.line(bx0, by1, bx1, by1, thick, ink);
            canvas.line(bx0, y, bx0, by1, thick, ink);
            canvas.line(bx1, y, bx1, by1, thick, ink);
            y += glyph_h;
        } else {
            let mut x = rx0 as f64 + margin;
            while x + glyph_w < rx1 as f64 - margin {
                let word = rng.random_range(2..=8);
                for _ in 0..word {
                    if x + glyph_w >= rx1 as f64 - margin {
                        break;
                    }
                    render_glyph(canvas, rng, x, y, glyph_w, glyph_h, thick, ink);
                    x += glyph_w + gap;
                }
                x += glyph_w * rng.random_range(0.6..1.2);
            }
        }
        y += line_h;
    }
}

fn text_image(size: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let paper = 1.0 - rng.random_range(0.0..0.06);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.015..0.0));
    let bg = tint.map(|t| paper + t);
    let ink_level = rng.random_range(0.0..0.06);
    let ink: [f64; 3] = std::array::from_fn(|_| ink_level + rng.random_range(0.0..0.02));
    let mut canvas = Canvas::filled(size, bg);
    let s = size as i64;
    render_text(&mut canvas, rng, (0, 0, s, s), ink);
    // scanner optics: ink edges ramp over a couple of pixels instead of stepping
    for plane in canvas.planes.iter_mut() {
        *plane = gaussian_blur(plane, size, 1.0);
    }
    canvas
}

fn gaussian_blur(field: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let s = size as i64;
    // periodic boundary keeps the statistics stationary up to the edges
    let wrap = |v: i64| v.rem_euclid(s) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * field[y * size + wrap(x as i64 + k as i64 - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[wrap(y as i64 + k as i64 - radius) * size + x])
                .sum();
        }
    }
    out
}

/// Difference-of-Gaussians filtered white noise, normalized to unit variance.
fn band_pass_noise(size: usize, rng: &mut ChaCha8Rng, sigma_lo: f64, ratio: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(rng)).collect();
    let fine = gaussian_blur(&white, size, sigma_lo);
    let coarse = gaussian_blur(&white, size, sigma_lo * ratio);
    let band: Vec<f64> = fine.iter().zip(&coarse).map(|(a, b)| a - b).collect();
    let mean = band.iter().sum::<f64>() / band.len() as f64;
    let var = band.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / band.len() as f64;
    let std = var.sqrt().max(1e-12);
    band.iter().map(|v| (v - mean) / std).collect()
}

fn texture_image(size: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let sigma = rng.random_range(0.6..2.2);
    let ratio = rng.random_range(2.0..4.0);
    let lum = band_pass_noise(size, rng, sigma, ratio);
    let detail = band_pass_noise(size, rng, 0.7, 2.5);
    let chroma = band_pass_noise(size, rng, sigma * 1.5, 3.0);
    let contrast = rng.random_range(0.08..0.16);
    let detail_amp = rng.random_range(0.0..0.05);
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let chroma_amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let mut canvas = Canvas::filled(size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let ramp = gx * (x as f64 / size as f64 - 0.5) + gy * (y as f64 / size as f64 - 0.5);
            let l = 0.5 + ramp + contrast * lum[i] + detail_amp * detail[i];
            for c in 0..3 {
                canvas.planes[c][i] = (l + base[c] + chroma_amp[c] * chroma[i]).clamp(0.0, 1.0);
            }
        }
    }
    canvas
}

/// Texture and text pages side by side. The text share varies from image to
/// image, so a mixed set is far less homogeneous than either class.
fn mixed_image(size: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let mut canvas = texture_image(size, rng);
    let page = text_image(size, rng);
    let s = size as i64;
    let cut = (rng.random_range(0.1..0.9) * s as f64).round() as i64;
    let vertical: bool = rng.random();
    let text_first: bool = rng.random();
    let main = match (vertical, text_first) {
        (true, true) => (0, 0, cut, s),
        (true, false) => (cut, 0, s, s),
        (false, true) => (0, 0, s, cut),
        (false, false) => (0, cut, s, s),
    };
    let mut regions = vec![main];
    if rng.random_bool(0.5) {
        // a caption-like strip inside the texture side
        let w = rng.random_range(s / 4..=s / 2);
        let h = rng.random_range(s / 8..=s / 4);
        let (x, y) = (rng.random_range(0..=s - w), rng.random_range(0..=s - h));
        regions.push((x, y, x + w, y + h));
    }
    for (x0, y0, x1, y1) in regions {
        for y in y0..y1 {
            for x in x0..x1 {
                let i = (y * s + x) as usize;
                for c in 0..3 {
                    canvas.planes[c][i] = page.planes[c][i];
                }
            }
        }
    }
    canvas
}

/// HR image of `class` from the given generator stream.
pub fn synth_image<T: Scalar>(class: SynthClass, size: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let canvas = match class {
        SynthClass::Text => text_image(size, rng),
        SynthClass::Texture => texture_image(size, rng),
        SynthClass::Mixed => mixed_image(size, rng),
    };
    canvas.into_tensor()
}

/// `n` HR images of `class` with LR counterparts from `degradation`.
///
/// Item `i` is generated from the stream `(seed, class, split, i)` and its
/// noise from `(seed, class, split, i, 1)`, so every pair is stable. Both HR
/// and LR are snapped to the 8-bit grid so a written dataset reloads exactly.
pub fn synth_corpus<T: Scalar>(
    class: SynthClass,
    split: Split,
    n: usize,
    size: usize,
    seed: u64,
    degradation: DegradationSpec,
) -> Result<ClassDataset<T>> {
    let scale = degradation.scale;
    if scale == 0 || !size.is_multiple_of(scale) || size < 96 {
        bail!(
            Config,
            "synthetic image size {size} must be at least 96 and divisible by {scale}"
        );
    }
    let tag = rng::label_tag(class.label());
    let split_tag = split as u64;
    let items = (0..n)
        .map(|i| {
            let mut gen = rng::stream(seed, &[tag, split_tag, i as u64]);
            let hr: Tensor<T> = synth_image(class, size, &mut gen);
            let noise_seed = rng::derive_seed(seed, &[tag, split_tag, i as u64, 1]);
            let lr = image_io::quantize_image(&degrade(&hr, &degradation.with_seed(noise_seed))?);
            Ok(ImagePair {
                id: format!("{}-{}-{i:03}", class.label(), split.as_str()),
                hr,
                lr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ClassDataset::new(class.label(), split, scale, items)
}
