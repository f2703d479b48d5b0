//! Deterministic DDIM refinement from Gaussian noise under RGB guidance.

use r2h_tensor::Tensor;

use crate::error::{Error, Result};
use crate::schedule::{sample_eps, NoiseSchedule};

/// Anything that predicts the clean cube `x̂_0` from a noisy state.
pub trait X0Predictor {
    /// Number of spectral bands produced.
    fn bands(&self) -> usize;

    fn predict_x0(&self, x_t: &Tensor, x_rgb: &Tensor, t: usize) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub record_trajectory: bool,
    /// Clamp the final estimate to `[0, 1]`; never applied between steps.
    pub clamp_output: bool,
}

impl SamplerConfig {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self {
            schedule,
            record_trajectory: false,
            clamp_output: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub hsi: Tensor,
    /// `x_T, x_{T-1}, …, x_1` when recording was requested.
    pub trajectory: Option<Vec<Tensor>>,
}

/// One deterministic update `x_t → x_{t-1}` for `2 ≤ t ≤ T`:
/// `x_{t-1} = √ᾱ_{t-1}·x̂ + √(1-ᾱ_{t-1})·(x_t - √ᾱ_t·x̂)/√(1-ᾱ_t)`.
pub fn ddim_step(x_t: &Tensor, x0_hat: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t < 2 || t > schedule.steps() {
        return Err(Error::invalid(format!(
            "ddim_step needs 2 <= t <= {}, got {t}; t = 1 returns the estimate directly",
            schedule.steps()
        )));
    }
    let (sa_t, sa_prev) = (schedule.sqrt_alphabar(t), schedule.sqrt_alphabar(t - 1));
    let noise_t = (1.0 - schedule.alphabar(t)).sqrt();
    let noise_prev = (1.0 - schedule.alphabar(t - 1)).sqrt();
    Ok(x_t.zip_map(x0_hat, |x, x0| {
        let eps = (x - sa_t * x0) / noise_t;
        sa_prev * x0 + noise_prev * eps
    })?)
}

/// Draws `x_T ~ N(0, I)` from `seed` and refines it for `T` steps.
pub fn reconstruct(x_rgb: &Tensor, model: &impl X0Predictor, cfg: &SamplerConfig, seed: u64) -> Result<Reconstruction> {
    let shape = rgb_shape(x_rgb)?;
    let x_t = sample_eps(&[model.bands(), shape.0, shape.1], seed);
    reconstruct_from(x_t, x_rgb, model, cfg)
}

/// Refinement from a given initial state; no randomness is consumed.
pub fn reconstruct_from(
    mut x_t: Tensor,
    x_rgb: &Tensor,
    model: &impl X0Predictor,
    cfg: &SamplerConfig,
) -> Result<Reconstruction> {
    rgb_shape(x_rgb)?;
    let schedule = &cfg.schedule;
    let mut trajectory = cfg.record_trajectory.then(Vec::new);
    for t in (1..=schedule.steps()).rev() {
        if let Some(traj) = trajectory.as_mut() {
            traj.push(x_t.clone());
        }
        let x0_hat = model.predict_x0(&x_t, x_rgb, t)?;
        if t == 1 {
            let hsi = if cfg.clamp_output { x0_hat.map(|v| v.clamp(0.0, 1.0)) } else { x0_hat };
            return Ok(Reconstruction { hsi, trajectory });
        }
        x_t = ddim_step(&x_t, &x0_hat, t, schedule)?;
    }
    unreachable!("schedules have at least one step")
}

fn rgb_shape(x_rgb: &Tensor) -> Result<(usize, usize)> {
    match *x_rgb.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(Error::invalid(format!("RGB condition must be [3, H, W], got {s:?}"))),
    }
}
