//! PSNR, SSIM and the per-set mean/variance summary.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// How scores were measured. Printed at the top of every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricProtocol {
    /// Pixels removed from each image side before PSNR and SSIM.
    pub border_crop: usize,
}

impl MetricProtocol {
    pub fn new(border_crop: usize) -> Self {
        MetricProtocol { border_crop }
    }

    pub fn header(&self) -> String {
        format!(
            "metric protocol: PSNR on RGB in [0,1], peak 1, border crop {} px; \
             SSIM 11x11 gaussian sigma 1.5, C1=0.01^2, C2=0.03^2, per channel, valid windows, same crop; \
             variance is population variance (divide by n); infinite PSNR excluded from mean/variance",
            self.border_crop
        )
    }
}

/// Planes `[.., H, W]` of an image or batch, returned as (plane count, h, w).
fn planes<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        bail!(Dimension, "image tensor needs at least 2 dims, got {:?}", s);
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.len() / (h * w).max(1), h, w))
}

/// Copy with `crop` pixels removed from each border of every plane.
pub fn crop_border<T: Scalar>(t: &Tensor<T>, crop: usize) -> Result<Tensor<T>> {
    if crop == 0 {
        return Ok(t.clone());
    }
    let (n, h, w) = planes(t)?;
    if h <= 2 * crop || w <= 2 * crop {
        bail!(Data, "border crop {crop} leaves nothing of a {h}x{w} image");
    }
    let (oh, ow) = (h - 2 * crop, w - 2 * crop);
    let mut out = Vec::with_capacity(n * oh * ow);
    for p in 0..n {
        for y in crop..h - crop {
            let row = (p * h + y) * w;
            out.extend_from_slice(&t.data()[row + crop..row + w - crop]);
        }
    }
    let mut shape = t.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Tensor::new(&shape, out)
}

/// `10 log10(1 / MSE)` after cropping; `f64::INFINITY` for identical inputs.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, border_crop: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        bail!(Dimension, "psnr of {:?} and {:?}", a.shape(), b.shape());
    }
    let a = crop_border(a, border_crop)?;
    let b = crop_border(b, border_crop)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = sum / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable 'valid' filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| plane[y * w + x + i] * win[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| tmp[(y + i) * ow + x] * win[i]).sum();
        }
    }
    out
}

/// Single-scale SSIM averaged over channels and valid window positions.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        bail!(Dimension, "ssim of {:?} and {:?}", a.shape(), b.shape());
    }
    let (n, h, w) = planes(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        bail!(Data, "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window");
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for p in 0..n {
        let pa: Vec<f64> = a.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let e_aa = filter_valid(&aa, h, w, &win);
        let e_bb = filter_valid(&bb, h, w, &win);
        let e_ab = filter_valid(&ab, h, w, &win);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Scores a prediction against its reference under `protocol`.
pub fn score_image<T: Scalar>(
    id: &str,
    pred: &Tensor<T>,
    reference: &Tensor<T>,
    protocol: &MetricProtocol,
) -> Result<ImageScore> {
    let psnr_db = psnr(pred, reference, protocol.border_crop)?;
    let ssim = ssim(
        &crop_border(pred, protocol.border_crop)?,
        &crop_border(reference, protocol.border_crop)?,
    )?;
    Ok(ImageScore {
        id: id.to_string(),
        psnr_db,
        ssim,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub protocol: MetricProtocol,
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    /// Population variance of the finite PSNR values.
    pub var_psnr: f64,
    pub mean_ssim: f64,
    /// Ids whose PSNR was infinite and therefore left out of mean/variance.
    pub excluded: Vec<String>,
}

/// Sum in ascending order so the result does not depend on input order.
fn ordered_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean and population variance of PSNR, and mean SSIM.
pub fn aggregate(label: &str, protocol: MetricProtocol, per_image: Vec<ImageScore>) -> Result<MetricsReport> {
    if per_image.is_empty() {
        bail!(Data, "no per-image scores to aggregate");
    }
    let mut finite: Vec<f64> = per_image.iter().map(|s| s.psnr_db).filter(|p| p.is_finite()).collect();
    if finite.is_empty() {
        bail!(Data, "every PSNR is infinite; nothing to aggregate");
    }
    let excluded = per_image
        .iter()
        .filter(|s| !s.psnr_db.is_finite())
        .map(|s| s.id.clone())
        .collect();
    let mean_psnr = ordered_mean(&mut finite);
    let mut sq: Vec<f64> = finite.iter().map(|p| (p - mean_psnr) * (p - mean_psnr)).collect();
    let var_psnr = ordered_mean(&mut sq);
    let mut ssims: Vec<f64> = per_image.iter().map(|s| s.ssim).collect();
    let mean_ssim = ordered_mean(&mut ssims);
    Ok(MetricsReport {
        label: label.to_string(),
        protocol,
        per_image,
        mean_psnr,
        var_psnr,
        mean_ssim,
        excluded,
    })
}

/// `"32.09 (5.53)"`.
pub fn format_mean_var(mean: f64, var: f64, decimals: usize) -> String {
    format!("{mean:.decimals$} ({var:.decimals$})")
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "inf".to_string()
    }
}

impl MetricsReport {
    pub fn summary(&self, decimals: usize) -> String {
        format_mean_var(self.mean_psnr, self.var_psnr, decimals)
    }

    /// Recomputes the summary from the per-image rows.
    pub fn recompute(&self) -> Result<MetricsReport> {
        aggregate(&self.label, self.protocol, self.per_image.clone())
    }

    /// Comma-separated table: `#` header lines, then
    /// `image_id,psnr_db,ssim,psnr_var` with one row per image and a final
    /// `mean` row carrying the summary (variance only on that row).
    pub fn to_csv(&self, header_lines: &[String]) -> String {
        let mut out = String::new();
        for line in header_lines {
            out.push_str(&format!("# {line}\n"));
        }
        out.push_str(&format!("# {}\n", self.protocol.header()));
        out.push_str(&format!("# label: {}\n", self.label));
        out.push_str("image_id,psnr_db,ssim,psnr_var\n");
        for s in &self.per_image {
            out.push_str(&format!("{},{},{:.6},\n", s.id, fmt_db(s.psnr_db), s.ssim));
        }
        out.push_str(&format!(
            "mean,{},{:.6},{:.6}\n",
            fmt_db(self.mean_psnr),
            self.mean_ssim,
            self.var_psnr
        ));
        out
    }
}
