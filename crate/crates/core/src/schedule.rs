//! Linear-in-√ᾱ noise schedule and the forward diffusion process.
//!
//! `√ᾱ_t` falls linearly from 1 at `t = 0` to `δ` at `t = T`; the per-step
//! `α_t = ᾱ_t / ᾱ_{t-1}` and `β_t = 1 - α_t` follow from it.

use r2h_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 5;
pub const DEFAULT_DELTA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    delta: f64,
    /// Indexed `t = 0..=T`.
    sqrt_alphabar: Vec<f64>,
    /// Indexed `t = 0..=T`.
    alphabar: Vec<f64>,
    /// Indexed `t - 1` for `t = 1..=T`.
    alpha: Vec<f64>,
    /// Indexed `t - 1` for `t = 1..=T`.
    beta: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, delta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
        }
        let t_max = steps as f64;
        let sqrt_alphabar: Vec<f64> = (0..=steps)
            .map(|t| match t {
                0 => 1.0,
                t if t == steps => delta,
                t => 1.0 - (1.0 - delta) * t as f64 / t_max,
            })
            .collect();
        let alphabar: Vec<f64> = sqrt_alphabar.iter().map(|s| s * s).collect();
        let alpha: Vec<f64> = alphabar.windows(2).map(|w| w[1] / w[0]).collect();
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        Ok(Self {
            steps,
            delta,
            sqrt_alphabar,
            alphabar,
            alpha,
            beta,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `√ᾱ_t` for `t = 0..=T`.
    pub fn sqrt_alphabar(&self, t: usize) -> f64 {
        self.sqrt_alphabar[t]
    }

    pub fn alphabar(&self, t: usize) -> f64 {
        self.alphabar[t]
    }

    /// `α_t` for `t = 1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn sqrt_alphabar_all(&self) -> &[f64] {
        &self.sqrt_alphabar
    }

    pub fn alphabar_all(&self) -> &[f64] {
        &self.alphabar
    }

    pub fn alpha_all(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta_all(&self) -> &[f64] {
        &self.beta
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps).contains(&t) {
            Ok(())
        } else {
            Err(Error::invalid(format!("step {t} outside 1..={}", self.steps)))
        }
    }

    /// CSV with columns `t, sqrt_alphabar, alphabar, alpha, beta`; the
    /// per-step columns are empty on the `t = 0` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,sqrt_alphabar,alphabar,alpha,beta\n");
        for t in 0..=self.steps {
            let (a, b) = if t == 0 {
                (String::new(), String::new())
            } else {
                (self.alpha(t).to_string(), self.beta(t).to_string())
            };
            out.push_str(&format!(
                "{t},{},{},{a},{b}\n",
                self.sqrt_alphabar[t], self.alphabar[t]
            ));
        }
        out
    }
}

/// `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·eps`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    let (signal, noise) = (schedule.sqrt_alphabar(t), (1.0 - schedule.alphabar(t)).sqrt());
    Ok(x0.zip_map(eps, |x, e| signal * x + noise * e)?)
}

/// Standard-normal draw of the given shape from a seed.
pub fn sample_eps(shape: &[usize], seed: u64) -> Tensor {
    sample_eps_with(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Standard-normal draw (ziggurat sampler) from an existing generator.
pub fn sample_eps_with(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}
