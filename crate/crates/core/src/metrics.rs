//! Reconstruction quality metrics on `[B, H, W]` cubes with values in `[0, 1]`.

use r2h_tensor::Tensor;

use crate::error::{Error, Result};

/// Floor on the MRAE denominator.
pub const MRAE_TAU: f64 = 1e-4;
/// Floor on each vector norm in SAM.
pub const SAM_ETA: f64 = 1e-8;

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("metric inputs are empty"));
    }
    Ok(())
}

/// `mean(|x̂ - x| / max(x, τ))`.
pub fn mrae(x_hat: &Tensor, x: &Tensor) -> Result<f64> {
    check_same(x_hat, x)?;
    let total: f64 = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs() / b.max(MRAE_TAU))
        .sum();
    Ok(total / x.len() as f64)
}

pub fn mse(x_hat: &Tensor, x: &Tensor) -> Result<f64> {
    check_same(x_hat, x)?;
    let total: f64 = x_hat.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(total / x.len() as f64)
}

pub fn rmse(x_hat: &Tensor, x: &Tensor) -> Result<f64> {
    Ok(mse(x_hat, x)?.sqrt())
}

/// `10·log10(1 / MSE)` with peak 1; `f64::INFINITY` when the inputs are identical.
pub fn psnr(x_hat: &Tensor, x: &Tensor) -> Result<f64> {
    let m = mse(x_hat, x)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Mean spectral angle in degrees between per-pixel band vectors.
///
/// Each vector is scaled by `1 / max(‖v‖, η)` and the angle is taken as
/// `2·atan2(‖â - b̂‖, ‖â + b̂‖)`, which stays accurate near 0° where
/// `arccos` of a rounded cosine does not.
///
/// Rank-3 inputs are `[B, H, W]`; a rank-1 input is a single pixel.
pub fn sam(x_hat: &Tensor, x: &Tensor) -> Result<f64> {
    check_same(x_hat, x)?;
    let (bands, pixels) = match *x.shape() {
        [b] => (b, 1),
        [b, h, w] => (b, h * w),
        ref s => return Err(Error::invalid(format!("SAM expects [B, H, W] or [B], got {s:?}"))),
    };
    let (a, b) = (x_hat.data(), x.data());
    let norm = |d: &[f64], p: usize| (0..bands).map(|k| d[k * pixels + p].powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for p in 0..pixels {
        let (sa, sb) = (1.0 / norm(a, p).max(SAM_ETA), 1.0 / norm(b, p).max(SAM_ETA));
        let (mut diff, mut sum) = (0.0, 0.0);
        for k in 0..bands {
            let (u, v) = (a[k * pixels + p] * sa, b[k * pixels + p] * sb);
            diff += (u - v) * (u - v);
            sum += (u + v) * (u + v);
        }
        total += (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees();
    }
    Ok(total / pixels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mrae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub sam: f64,
}

impl Metrics {
    pub fn compute(x_hat: &Tensor, x: &Tensor) -> Result<Self> {
        Ok(Self {
            mrae: mrae(x_hat, x)?,
            rmse: rmse(x_hat, x)?,
            psnr: psnr(x_hat, x)?,
            sam: sam(x_hat, x)?,
        })
    }

    /// Per-image average.
    pub fn mean(items: &[Metrics]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self {
            mrae: avg(|m| m.mrae),
            rmse: avg(|m| m.rmse),
            psnr: avg(|m| m.psnr),
            sam: avg(|m| m.sam),
        })
    }
}
