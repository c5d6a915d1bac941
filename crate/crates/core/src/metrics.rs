//! Reference-based quality metrics and router accuracy.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB. Identical images have no finite PSNR.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }

    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    /// Mean over images; any infinite entry makes the mean infinite.
    pub fn mean(values: &[Psnr]) -> Result<Psnr> {
        if values.is_empty() {
            return Err(Error::invalid("mean of no PSNR values"));
        }
        let mut s = 0.0;
        for v in values {
            match v {
                Psnr::Infinite => return Ok(Psnr::Infinite),
                Psnr::Finite(d) => s += d,
            }
        }
        Ok(Psnr::Finite(s / values.len() as f64))
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.4}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

// JSON has no infinity, so the infinite case is the string "inf".
impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR value {s:?}"))),
        }
    }
}

fn same_shape(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "metric inputs differ: {} vs {}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

pub fn mse(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    same_shape(x, y)?;
    if x.is_empty() {
        return Err(Error::shape("mse of empty tensors"));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(s / x.len() as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (peak * peak / mse).log10())
    }
}

/// PSNR over all channels jointly.
pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>, peak: f64) -> Result<Psnr> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(x, y)?, peak))
}

/// Luminance planes of an RGB batch, one `h*w` vector per sample.
pub fn luminance(x: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let s = x.shape();
    if s.c != 3 {
        return Err(Error::shape(format!("luminance needs RGB input, got {s}")));
    }
    let plane = s.plane();
    Ok((0..s.n)
        .map(|n| {
            let px = x.sample(n);
            (0..plane)
                .map(|i| LUMA[0] * px[i] as f64 + LUMA[1] * px[plane + i] as f64 + LUMA[2] * px[2 * plane + i] as f64)
                .collect()
        })
        .collect())
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h`×`w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean structural similarity on luminance, averaged over the batch.
pub fn ssim(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    same_shape(x, y)?;
    let Shape { n, h, w, .. } = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    if n == 0 {
        return Err(Error::shape("SSIM of an empty batch"));
    }
    let (lx, ly) = (luminance(x)?, luminance(y)?);
    let s: f64 = lx.iter().zip(&ly).map(|(a, b)| ssim_plane(a, b, h, w, 1.0)).sum();
    Ok(s / n as f64)
}

pub fn router_accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("router accuracy of no samples"));
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Metrics for one evaluated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub psnr: Vec<Psnr>,
    pub ssim: Vec<f64>,
    pub mean_psnr: Psnr,
    pub mean_ssim: f64,
    pub router_accuracy: Option<f64>,
}

impl MetricRecord {
    pub fn new(
        dataset: impl Into<String>,
        psnr: Vec<Psnr>,
        ssim: Vec<f64>,
        router_accuracy: Option<f64>,
    ) -> Result<Self> {
        if psnr.len() != ssim.len() || psnr.is_empty() {
            return Err(Error::invalid(
                "metric record needs matching, non-empty PSNR and SSIM lists",
            ));
        }
        let mean_ssim = ssim.iter().sum::<f64>() / ssim.len() as f64;
        Ok(MetricRecord {
            dataset: dataset.into(),
            mean_psnr: Psnr::mean(&psnr)?,
            psnr,
            ssim,
            mean_ssim,
            router_accuracy,
        })
    }
}
