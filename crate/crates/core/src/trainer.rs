//! Training loop: random step, noised target, direct `x_0` regression.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use r2h_tensor::{Parameter, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{augment, Dataset, SpectralSample};
use crate::denoiser::{predict, Denoiser};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::metrics::Metrics;
use crate::sampler::{reconstruct, SamplerConfig, X0Predictor};
use crate::schedule::{forward_sample, sample_eps_with, NoiseSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub total_steps: usize,
    pub lambda: f64,
    pub steps: usize,
    pub delta: f64,
    pub seed: u64,
    pub val_every: usize,
    pub patch_size: usize,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr0: 4e-4,
            total_steps: 1000,
            lambda: 1.0,
            steps: 5,
            delta: 0.01,
            seed: 0,
            val_every: 250,
            patch_size: 16,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.total_steps == 0 || self.val_every == 0 || self.patch_size == 0 {
            return bad("batch_size, total_steps, val_every and patch_size must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        LossConfig::new(self.lambda)?;
        NoiseSchedule::new(self.steps, self.delta).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.delta)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda: self.lambda }
    }

    /// `lr0·(1 + cos(π·step/total_steps))/2`.
    pub fn lr(&self, step: usize) -> f64 {
        cosine_lr(self.lr0, step, self.total_steps)
    }
}

pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    lr0 * (1.0 + (PI * step as f64 / total as f64).cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor, Tensor)> {
        self.moments.get(name)
    }

    /// Updates every trainable parameter that has a gradient in `grads`.
    pub fn update(&mut self, params: Vec<&mut Parameter>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for p in params.into_iter().filter(|p| p.trainable) {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.shape() != p.tensor.shape() {
                return Err(Error::invalid(format!(
                    "gradient for {} has shape {:?}, parameter is {:?}",
                    p.name,
                    g.shape(),
                    p.tensor.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let w = p.tensor.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                w[i] -= lr * (step + weight_decay * w[i]);
            }
        }
        Ok(())
    }
}

/// One training example: a clean/RGB pair, the step, and the noise draw.
#[derive(Debug, Clone)]
pub struct Draw {
    pub sample: SpectralSample,
    pub t: usize,
    pub eps: Tensor,
}

pub fn sample_timestep(rng: &mut impl Rng, steps: usize) -> usize {
    rng.gen_range(1..=steps)
}

/// Loss and parameter gradients for one example.
pub fn example_gradients<D: Denoiser + ?Sized>(
    model: &D,
    draw: &Draw,
    schedule: &NoiseSchedule,
    loss: &LossConfig,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let x_t = forward_sample(&draw.sample.hsi, draw.t, &draw.eps, schedule)?;
    let mut tape = Tape::new();
    let x_t = tape.constant(x_t);
    let rgb = tape.constant(draw.sample.rgb.clone());
    let target = tape.constant(draw.sample.hsi.clone());
    let x0_hat = model.forward(&mut tape, x_t, rgb, draw.t)?;
    let l = total_loss(&mut tape, x0_hat, target, loss)?;
    let value = tape.value(l).data()[0];
    Ok((value, tape.backward(l)?.into_named()))
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op, node }) => Error::Diverged {
            step,
            detail: format!("first non-finite tensor is the output of {op} (node {node})"),
        },
        other => other,
    }
}

/// Averages loss and gradients over `draws` (evaluated in parallel, summed
/// in order) and applies one AdamW update. Returns the mean loss.
pub fn train_step<D: Denoiser>(
    model: &mut D,
    opt: &mut AdamW,
    draws: &[Draw],
    schedule: &NoiseSchedule,
    loss: &LossConfig,
    lr: f64,
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let step = opt.steps_taken() as usize;
    let shared: &D = model;
    let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = draws
        .par_iter()
        .map(|d| example_gradients(shared, d, schedule, loss))
        .collect();
    let n = draws.len() as f64;
    let mut mean_loss = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in results {
        let (l, g) = r.map_err(|e| diverged(step, e))?;
        mean_loss += l / n;
        for (name, gi) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, gi);
                }
            }
        }
    }
    if !mean_loss.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss is {mean_loss}"),
        });
    }
    for (name, g) in grads.iter_mut() {
        if !g.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient of {name} is non-finite"),
            });
        }
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    opt.update(model.params_mut(), &grads, lr)?;
    Ok(mean_loss)
}

struct Predictor<'a, D: ?Sized>(&'a D);

impl<D: Denoiser + ?Sized> X0Predictor for Predictor<'_, D> {
    fn bands(&self) -> usize {
        self.0.bands()
    }

    fn predict_x0(&self, x_t: &Tensor, x_rgb: &Tensor, t: usize) -> Result<Tensor> {
        predict(self.0, x_t, x_rgb, t)
    }
}

/// Reconstructs every sample (sample `i` starts from noise seeded with
/// `seed + i`) and returns per-image metrics.
pub fn evaluate<D: Denoiser + ?Sized>(
    model: &D,
    samples: &[SpectralSample],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Metrics>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let rec = reconstruct(&s.rgb, &Predictor(model), sampler, seed.wrapping_add(i as u64))?;
            Metrics::compute(&rec.hsi, &s.hsi)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValRecord {
    /// Number of updates applied when the evaluation ran.
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy)]
pub enum FitEvent<'a> {
    Step(&'a StepRecord),
    Validation(&'a ValRecord),
}

#[derive(Debug, Clone)]
pub struct FitResult<D> {
    pub model: D,
    pub best: D,
    pub best_val: ValRecord,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValRecord>,
}

impl<D> FitResult<D> {
    pub fn initial_loss(&self) -> f64 {
        self.steps.first().map_or(f64::NAN, |s| s.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.loss)
    }

    /// Mean loss over the first / last `window` steps.
    pub fn loss_window(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.steps.len().max(1));
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
        (mean(&self.steps[..w]), mean(&self.steps[self.steps.len() - w..]))
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{:e},{:.9e}\n", s.step, s.lr, s.loss));
        }
        out
    }

    pub fn val_csv(&self) -> String {
        let mut out = String::from("step,mrae,rmse,psnr,sam\n");
        for v in &self.validations {
            let m = v.metrics;
            out.push_str(&format!("{},{:.9},{:.9},{:.6},{:.6}\n", v.step, m.mrae, m.rmse, m.psnr, m.sam));
        }
        out
    }
}

/// Runs `total_steps` updates on augmented batches drawn with replacement,
/// validating every `val_every` steps and after the last one, and keeps the
/// snapshot with the best mean validation PSNR. The dataset is only read.
pub fn fit<D: Denoiser + Clone>(
    mut model: D,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_event: impl FnMut(FitEvent<'_>),
) -> Result<FitResult<D>> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("training needs nonempty train and val splits"));
    }
    let schedule = cfg.schedule()?;
    let loss = cfg.loss();
    let sampler = SamplerConfig::new(schedule.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw);
    let bands = model.bands();

    let mut steps = Vec::with_capacity(cfg.total_steps);
    let mut validations: Vec<ValRecord> = Vec::new();
    let mut best: Option<(D, ValRecord)> = None;
    for step in 0..cfg.total_steps {
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let src = &data.train[rng.gen_range(0..data.train.len())];
            let sample = augment(src, cfg.patch_size, &mut rng)?;
            let t = sample_timestep(&mut rng, schedule.steps());
            let (h, w) = sample.hw();
            let eps = sample_eps_with(&[bands, h, w], &mut rng);
            draws.push(Draw { sample, t, eps });
        }
        let lr = cfg.lr(step);
        let l = train_step(&mut model, &mut opt, &draws, &schedule, &loss, lr)?;
        let rec = StepRecord { step, lr, loss: l };
        on_event(FitEvent::Step(&rec));
        steps.push(rec);

        let done = step + 1;
        if done % cfg.val_every == 0 || done == cfg.total_steps {
            let per_image = evaluate(&model, &data.val, &sampler, cfg.seed)?;
            let metrics = Metrics::mean(&per_image).expect("nonempty val split");
            let v = ValRecord { step: done, metrics };
            on_event(FitEvent::Validation(&v));
            validations.push(v);
            if best.as_ref().map_or(true, |(_, b)| metrics.psnr > b.metrics.psnr) {
                best = Some((model.clone(), v));
            }
        }
    }
    let (best, best_val) = best.expect("at least one validation");
    Ok(FitResult {
        model,
        best,
        best_val,
        steps,
        validations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr(0), cfg.lr0);
        assert!(cfg.lr(cfg.total_steps).abs() < 1e-20);
        assert!((cfg.lr(cfg.total_steps / 2) - cfg.lr0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn timesteps_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 6];
        for _ in 0..10_000 {
            let t = sample_timestep(&mut rng, 5);
            assert!((1..=5).contains(&t));
            seen[t] = true;
        }
        assert!(seen[1..].iter().all(|&s| s));
    }

    fn quadratic_step(w: &mut Parameter, opt: &mut AdamW, lr: f64) -> f64 {
        let x = w.tensor.data()[0];
        let grads = BTreeMap::from([(w.name.clone(), Tensor::scalar(2.0 * (x - 3.0)))]);
        opt.update(vec![w], &grads, lr).unwrap();
        (x - 3.0).powi(2)
    }

    #[test]
    fn single_step_reduces_toy_loss() {
        let mut w = Parameter::new("w", Tensor::scalar(0.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        let before = quadratic_step(&mut w, &mut opt, 0.1);
        let after = (w.tensor.data()[0] - 3.0).powi(2);
        assert!(after < before);
        assert_eq!(opt.moments("w").unwrap().0.shape(), w.tensor.shape());
    }

    #[test]
    fn converges_on_convex_quadratic_without_decay() {
        let mut w = Parameter::new("w", Tensor::scalar(-2.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for s in 0..5000 {
            quadratic_step(&mut w, &mut opt, cosine_lr(0.1, s, 5000));
        }
        assert!((w.tensor.data()[0] - 3.0).abs() < 1e-6, "{}", w.tensor.data()[0]);
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut w = Parameter::frozen("w", Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        opt.update(vec![&mut w], &grads, 0.1).unwrap();
        assert_eq!(w.tensor.data()[0], 1.0);
    }
}
