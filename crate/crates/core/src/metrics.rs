//! PSNR and SSIM with aggregate statistics.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(x: &[f64], y: &[f64], data_range: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(CoreError::input("psnr", format!("lengths {} and {}", x.len(), y.len())));
    }
    if data_range <= 0.0 {
        return Err(CoreError::input("psnr", format!("data_range {data_range}")));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a `h×w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid 11×11 Gaussian windows of two square images.
pub fn ssim(x: &[f64], y: &[f64], size: usize, data_range: f64) -> Result<f64> {
    if x.len() != y.len() || x.len() != size * size {
        return Err(CoreError::input("ssim", format!("lengths {} and {} for size {size}", x.len(), y.len())));
    }
    if size < SSIM_WIN {
        return Err(CoreError::input("ssim", format!("image {size}×{size} smaller than the {SSIM_WIN}×{SSIM_WIN} window")));
    }
    let k = gaussian_window();
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, size, size, &k);
    let my = filter_valid(y, size, size, &k);
    let mxx = filter_valid(&prod(x, x), size, size, &k);
    let myy = filter_valid(&prod(y, y), size, size, &k);
    let mxy = filter_valid(&prod(x, y), size, size, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = mxx[i] - a * a;
        let vy = myy[i] - b * b;
        let cxy = mxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    AllFrames,
    LastFrame,
}

impl Scope {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::AllFrames => "all_frames",
            Scope::LastFrame => "last_frame",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scope: Scope,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub count: usize,
}

/// Mean and population standard deviation. Infinite samples make the mean infinite;
/// the spread is then 0 if every sample is infinite and infinite otherwise.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if v.iter().any(|x| x.is_infinite()) {
        let all = v.iter().all(|x| x.is_infinite());
        return (f64::INFINITY, if all { 0.0 } else { f64::INFINITY });
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl MetricRow {
    pub fn from_samples(scope: Scope, psnrs: &[f64], ssims: &[f64]) -> Self {
        let (pm, ps) = mean_std(psnrs);
        let (sm, ss) = mean_std(ssims);
        MetricRow {
            scope,
            psnr_mean: pm,
            psnr_std: ps,
            ssim_mean: sm,
            ssim_std: ss,
            count: psnrs.len(),
        }
    }
}

/// Formats a metric value for CSV; infinity prints as `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}
