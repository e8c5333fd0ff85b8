//! PSNR and SSIM.
//!
//! SSIM uses the usual constants: an 11×11 Gaussian window with σ = 1.5,
//! K1 = 0.01, K2 = 0.03, population (biased) local moments, and the mean of
//! the SSIM map over positions where the window fits entirely.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `f64::INFINITY` when the images are identical.
    pub psnr_db: f64,
    pub ssim: f64,
    pub data_range: f64,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((*h, *w)),
        other => Err(Error::InvalidArgument(format!(
            "metrics expect a single image plane, got {other:?}"
        ))),
    }
}

fn check_pair(pred: &Tensor, target: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let dims = plane(target)?;
    if plane(pred)? != dims {
        return Err(Error::shape(op, target.shape(), pred.shape()));
    }
    Ok(dims)
}

fn resolve_range(target: &Tensor, data_range: Option<f64>) -> Result<f64> {
    let r = data_range.unwrap_or_else(|| target.max());
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidArgument(format!("data range must be positive, got {r}")));
    }
    Ok(r)
}

/// `10·log10(range² / MSE)`; `range` defaults to `max(target)`.
pub fn psnr(pred: &Tensor, target: &Tensor, data_range: Option<f64>) -> Result<f64> {
    check_pair(pred, target, "psnr")?;
    let range = resolve_range(target, data_range)?;
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / target.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region, `(h-10) × (w-10)` output.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| g[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| g[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

pub fn ssim(pred: &Tensor, target: &Tensor, data_range: Option<f64>) -> Result<f64> {
    let (h, w) = check_pair(pred, target, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let range = resolve_range(target, data_range)?;
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let g = gaussian_window();
    let (x, y) = (pred.data(), target.data());
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };

    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let exx = filter_valid(&prod(x, x), h, w, &g);
    let eyy = filter_valid(&prod(y, y), h, w, &g);
    let exy = filter_valid(&prod(x, y), h, w, &g);

    let mut total = 0.0;
    for k in 0..mx.len() {
        let (ux, uy) = (mx[k], my[k]);
        let vx = exx[k] - ux * ux;
        let vy = eyy[k] - uy * uy;
        let cxy = exy[k] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Both metrics with `data_range = max(target)`.
pub fn evaluate(pred: &Tensor, target: &Tensor) -> Result<MetricReport> {
    let data_range = resolve_range(target, None)?;
    Ok(MetricReport {
        psnr_db: psnr(pred, target, Some(data_range))?,
        ssim: ssim(pred, target, Some(data_range))?,
        data_range,
        window: SSIM_WINDOW,
        sigma: SSIM_SIGMA,
        k1: SSIM_K1,
        k2: SSIM_K2,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
