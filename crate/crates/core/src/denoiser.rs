//! Normalization-free residual U-Net predicting the clean cube `x̂_0`.
//!
//! `x̂_0 = φ(x_rgb) + F(x_t, x_rgb, t)`: a single 3×3 convolution `φ` gives a
//! coarse base estimate and the U-Net `F` learns the residual. Inside `F`:
//!
//! * stem convolutions lift `x_rgb` and `x_t` to `C` channels and GSRM fuses
//!   them into the one stream the U-Net consumes;
//! * each encoder scale runs its ResBlocks (SiLU + 3×3 conv, time bias after
//!   the first conv, no normalization) followed by a HATA block, then a
//!   stride-2 conv halves the resolution;
//! * the decoder mirrors this, upsampling (nearest 2× + 3×3 conv) and fusing
//!   the encoder skip with concat + 1×1 conv;
//! * the only normalization in the network sits in the final stage, ahead of
//!   a zero-initialized 3×3 output conv, so a fresh model returns `φ(x_rgb)`.

use std::collections::BTreeMap;

use r2h_tensor::{Conv2dOptions, Parameter, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gsrm::Gsrm;
use crate::hata::Hata;
use crate::nn::{Conv2d, LayerKind, Linear, Module};
use crate::sampler::X0Predictor;

pub const RGB_CHANNELS: usize = 3;
const FINAL_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub resblocks_per_scale: usize,
    pub bands: usize,
    pub time_embed_dim: usize,
    pub use_gsrm: bool,
    pub use_hata: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 31,
            channel_multipliers: vec![1, 1, 1],
            resblocks_per_scale: 2,
            bands: 31,
            time_embed_dim: 64,
            use_gsrm: true,
            use_hata: true,
        }
    }
}

impl DenoiserConfig {
    pub fn scales(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_channels * self.channel_multipliers[scale]
    }

    /// H and W must be multiples of this (one halving per extra scale).
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.scales() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.base_channels == 0 || self.bands == 0 || self.resblocks_per_scale == 0 {
            return bad("base_channels, bands and resblocks_per_scale must be positive");
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be a non-empty list of positive integers");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be a positive even number");
        }
        Ok(())
    }

    /// Flat `key = value` lines.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mults: Vec<String> = self.channel_multipliers.iter().map(|m| m.to_string()).collect();
        vec![
            ("base_channels".into(), self.base_channels.to_string()),
            ("channel_multipliers".into(), mults.join(",")),
            ("resblocks_per_scale".into(), self.resblocks_per_scale.to_string()),
            ("bands".into(), self.bands.to_string()),
            ("time_embed_dim".into(), self.time_embed_dim.to_string()),
            ("use_gsrm".into(), self.use_gsrm.to_string()),
            ("use_hata".into(), self.use_hata.to_string()),
        ]
    }

    /// Applies one `key = value` pair; returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse_usize = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
        };
        let parse_bool = |v: &str| {
            v.trim()
                .parse::<bool>()
                .map_err(|_| Error::Config(format!("{key}: expected true or false, got {v:?}")))
        };
        match key {
            "base_channels" => self.base_channels = parse_usize(value)?,
            "channel_multipliers" => {
                self.channel_multipliers = value.split(',').map(parse_usize).collect::<Result<_>>()?;
            }
            "resblocks_per_scale" => self.resblocks_per_scale = parse_usize(value)?,
            "bands" => self.bands = parse_usize(value)?,
            "time_embed_dim" => self.time_embed_dim = parse_usize(value)?,
            "use_gsrm" => self.use_gsrm = parse_bool(value)?,
            "use_hata" => self.use_hata = parse_bool(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Sinusoidal step embedding: `e[2i] = sin(t / 10000^(2i/D))`, `e[2i+1] = cos(·)`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let t = t as f64;
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = t / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// A model usable by the trainer and the sampler.
pub trait Denoiser: Module + Send + Sync {
    fn bands(&self) -> usize;

    /// Records `x̂_0` for `x_t: [B, H, W]`, `x_rgb: [3, H, W]` at step `t`.
    fn forward(&self, tape: &mut Tape, x_t: Var, x_rgb: Var, t: usize) -> Result<Var>;
}

/// Evaluates a denoiser on plain tensors with a throwaway tape.
pub fn predict<D: Denoiser + ?Sized>(model: &D, x_t: &Tensor, x_rgb: &Tensor, t: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x_t = tape.constant(x_t.clone());
    let x_rgb = tape.constant(x_rgb.clone());
    let out = model.forward(&mut tape, x_t, x_rgb, t)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// Offset of this block's channel bias inside the time-MLP output.
    pub bias_offset: usize,
}

impl ResBlock {
    fn new(name: &str, channels: usize, bias_offset: usize, rng: &mut ChaCha8Rng) -> Self {
        let opts = Conv2dOptions::same(3);
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), channels, channels, 3, opts, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), channels, channels, 3, opts, rng),
            bias_offset,
        }
    }

    fn channels(&self) -> usize {
        self.conv1.out_channels()
    }

    fn forward(&self, tape: &mut Tape, x: Var, time: Var) -> Result<Var> {
        let c = self.channels();
        let h = tape.silu(x)?;
        let h = self.conv1.forward(tape, h)?;
        let bias = tape.slice(time, 1, self.bias_offset, c)?;
        let bias = tape.reshape(bias, &[c])?;
        let h = tape.add_channel_bias(h, bias)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, h)?;
        Ok(tape.add(x, h)?)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv1.macs(h, w) + self.conv2.macs(h, w)
    }
}

/// ResBlocks followed by an optional HATA block applied residually.
#[derive(Debug, Clone)]
pub struct Stage {
    pub res: Vec<ResBlock>,
    pub hata: Option<Hata>,
}

impl Stage {
    fn forward(&self, tape: &mut Tape, mut h: Var, time: Var) -> Result<Var> {
        for block in &self.res {
            h = block.forward(tape, h, time)?;
        }
        if let Some(hata) = &self.hata {
            let a = hata.forward(tape, h)?;
            h = tape.add(h, a)?;
        }
        Ok(h)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.res.iter().map(|r| r.macs(h, w)).sum::<u64>() + self.hata.as_ref().map_or(0, |a| a.macs(h, w))
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        for r in &self.res {
            out.extend(r.conv1.params());
            out.extend(r.conv2.params());
        }
        if let Some(h) = &self.hata {
            out.extend(h.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        for r in &mut self.res {
            out.extend(r.conv1.params_mut());
            out.extend(r.conv2.params_mut());
        }
        if let Some(h) = &mut self.hata {
            out.extend(h.params_mut());
        }
        out
    }

    fn layer_kinds(&self) -> Vec<LayerKind> {
        let mut out = vec![LayerKind::Conv; 2 * self.res.len()];
        if let Some(h) = &self.hata {
            out.extend(h.layer_kinds());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub scale: usize,
    /// Nearest-2× upsample then 3×3 conv from the coarser scale; absent at the bottom.
    pub up: Option<Conv2d>,
    /// `concat(h, skip)` → 1×1 conv; absent at the bottom.
    pub fuse: Option<Conv2d>,
    pub stage: Stage,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    pub phi: Conv2d,
    pub stem_rgb: Conv2d,
    pub stem_noise: Conv2d,
    pub gsrm: Option<Gsrm>,
    pub encoder: Vec<Stage>,
    pub downs: Vec<Conv2d>,
    /// Ordered from the coarsest scale to the finest.
    pub decoder: Vec<DecoderStage>,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub norm_scale: Parameter,
    pub norm_shift: Parameter,
    pub final_conv: Conv2d,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c0 = config.channels_at(0);
        let same3 = Conv2dOptions::same(3);
        let scales = config.scales();

        let phi = Conv2d::new("phi", RGB_CHANNELS, config.bands, 3, same3, rng);
        let stem_rgb = Conv2d::new("stem.rgb", RGB_CHANNELS, c0, 3, same3, rng);
        let stem_noise = Conv2d::new("stem.noise", config.bands, c0, 3, same3, rng);
        let gsrm = config.use_gsrm.then(|| Gsrm::new("gsrm", c0, rng));

        let mut bias_offset = 0;
        let mut stage = |name: String, channels: usize, rng: &mut ChaCha8Rng| {
            let res = (0..config.resblocks_per_scale)
                .map(|i| {
                    let block = ResBlock::new(&format!("{name}.res.{i}"), channels, bias_offset, rng);
                    bias_offset += channels;
                    block
                })
                .collect();
            let hata = config.use_hata.then(|| Hata::new(&format!("{name}.hata"), channels, rng));
            Stage { res, hata }
        };

        let mut encoder = Vec::with_capacity(scales);
        let mut downs = Vec::with_capacity(scales - 1);
        for s in 0..scales {
            encoder.push(stage(format!("enc.{s}"), config.channels_at(s), rng));
            if s + 1 < scales {
                let opts = same3.with_stride(2);
                downs.push(Conv2d::new(
                    &format!("down.{s}"),
                    config.channels_at(s),
                    config.channels_at(s + 1),
                    3,
                    opts,
                    rng,
                ));
            }
        }
        let mut decoder = Vec::with_capacity(scales);
        for s in (0..scales).rev() {
            let ch = config.channels_at(s);
            let (up, fuse) = if s + 1 < scales {
                let up = Conv2d::new(&format!("dec.{s}.up"), config.channels_at(s + 1), ch, 3, same3, rng);
                let fuse = Conv2d::new(&format!("dec.{s}.fuse"), 2 * ch, ch, 1, Conv2dOptions::default(), rng);
                (Some(up), Some(fuse))
            } else {
                (None, None)
            };
            let stage = stage(format!("dec.{s}"), ch, rng);
            decoder.push(DecoderStage { scale: s, up, fuse, stage });
        }
        let total_bias = bias_offset;

        let d = config.time_embed_dim;
        let time_fc1 = Linear::new("time.fc1", d, d, rng);
        let time_fc2 = Linear::new("time.fc2", d, total_bias, rng);
        let norm_scale = Parameter::new("final.norm.scale", Tensor::ones(&[c0]));
        let norm_shift = Parameter::new("final.norm.shift", Tensor::zeros(&[c0]));
        let final_conv = Conv2d::zeros("final.conv", c0, config.bands, 3, same3);

        Ok(Self {
            config,
            phi,
            stem_rgb,
            stem_noise,
            gsrm,
            encoder,
            downs,
            decoder,
            time_fc1,
            time_fc2,
            norm_scale,
            norm_shift,
            final_conv,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// `φ(x_rgb)`: the coarse spectral estimate.
    pub fn base_estimate(&self, tape: &mut Tape, x_rgb: Var) -> Result<Var> {
        self.phi.forward(tape, x_rgb)
    }

    /// Channel biases for every ResBlock, `[1, Σ channels]`.
    fn time_biases(&self, tape: &mut Tape, t: usize) -> Result<Var> {
        let d = self.config.time_embed_dim;
        let e = tape.constant(Tensor::new(&[1, d], time_embedding(t, d))?);
        let h = self.time_fc1.forward(tape, e)?;
        let h = tape.silu(h)?;
        self.time_fc2.forward(tape, h)
    }

    fn check_inputs(&self, tape: &Tape, x_t: Var, x_rgb: Var) -> Result<(usize, usize)> {
        let (xs, rs) = (tape.shape(x_t), tape.shape(x_rgb));
        let &[b, h, w] = xs else {
            return Err(Error::invalid(format!("x_t must be [B, H, W], got {xs:?}")));
        };
        if b != self.config.bands {
            return Err(Error::invalid(format!("x_t has {b} bands, model expects {}", self.config.bands)));
        }
        if rs != [RGB_CHANNELS, h, w] {
            return Err(Error::invalid(format!("x_rgb must be [3, {h}, {w}], got {rs:?}")));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!(
                "spatial size {h}x{w} must be divisible by {m} for {} scales",
                self.config.scales()
            )));
        }
        Ok((h, w))
    }

    /// The residual branch `F(x_t, x_rgb, t)`.
    pub fn residual(&self, tape: &mut Tape, x_t: Var, x_rgb: Var, t: usize) -> Result<Var> {
        self.check_inputs(tape, x_t, x_rgb)?;
        let time = self.time_biases(tape, t)?;
        let f_rgb = self.stem_rgb.forward(tape, x_rgb)?;
        let f_noise = self.stem_noise.forward(tape, x_t)?;
        let mut h = match &self.gsrm {
            Some(g) => g.forward(tape, f_rgb, f_noise)?,
            None => tape.add(f_rgb, f_noise)?,
        };

        let mut skips = Vec::with_capacity(self.encoder.len());
        for (s, stage) in self.encoder.iter().enumerate() {
            h = stage.forward(tape, h, time)?;
            skips.push(h);
            if let Some(down) = self.downs.get(s) {
                h = down.forward(tape, h)?;
            }
        }
        for dec in &self.decoder {
            if let (Some(up), Some(fuse)) = (&dec.up, &dec.fuse) {
                h = tape.upsample2x(h)?;
                h = up.forward(tape, h)?;
                h = tape.concat(&[h, skips[dec.scale]], 0)?;
                h = fuse.forward(tape, h)?;
            }
            h = dec.stage.forward(tape, h, time)?;
        }

        let h = tape.standardize(h, FINAL_NORM_EPS)?;
        let scale = tape.param(&self.norm_scale);
        let shift = tape.param(&self.norm_shift);
        let h = tape.mul_channel(h, scale)?;
        let h = tape.add_channel_bias(h, shift)?;
        self.final_conv.forward(tape, h)
    }

    /// Multiply-accumulates of one forward pass at `h × w`, counting
    /// convolutions, linear layers and the attention matrix products.
    pub fn macs_per_forward(&self, h: usize, w: usize) -> u64 {
        let at = |s: usize| (h >> s, w >> s);
        let mut total = self.phi.macs(h, w) + self.stem_rgb.macs(h, w) + self.stem_noise.macs(h, w);
        total += self.gsrm.as_ref().map_or(0, |g| g.macs(h, w));
        total += self.time_fc1.macs() + self.time_fc2.macs();
        for (s, stage) in self.encoder.iter().enumerate() {
            let (hs, ws) = at(s);
            total += stage.macs(hs, ws);
            if let Some(down) = self.downs.get(s) {
                total += down.macs(hs, ws);
            }
        }
        for dec in &self.decoder {
            let (hs, ws) = at(dec.scale);
            total += dec.up.as_ref().map_or(0, |c| c.macs(hs, ws));
            total += dec.fuse.as_ref().map_or(0, |c| c.macs(hs, ws));
            total += dec.stage.macs(hs, ws);
        }
        total + self.final_conv.macs(h, w)
    }

    /// FLOPs (2 per multiply-accumulate) of `steps` forward passes at `h × w`.
    pub fn count_flops(&self, h: usize, w: usize, steps: usize) -> u64 {
        2 * self.macs_per_forward(h, w) * steps as u64
    }

    pub fn count_params(&self) -> usize {
        self.num_params()
    }

    /// Replaces parameter values by name; every model parameter must be present
    /// with a matching shape.
    pub fn load_params(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in self.params_mut() {
            let v = values
                .get(&p.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", p.name)))?;
            if v.shape() != p.tensor.shape() {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = v.clone();
        }
        Ok(())
    }

    pub fn param_values(&self) -> BTreeMap<String, Tensor> {
        self.params().into_iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }
}

impl Denoiser for DenoiserModel {
    fn bands(&self) -> usize {
        self.config.bands
    }

    fn forward(&self, tape: &mut Tape, x_t: Var, x_rgb: Var, t: usize) -> Result<Var> {
        let base = self.base_estimate(tape, x_rgb)?;
        let residual = self.residual(tape, x_t, x_rgb, t)?;
        Ok(tape.add(base, residual)?)
    }
}

impl Module for DenoiserModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.phi.params();
        out.extend(self.stem_rgb.params());
        out.extend(self.stem_noise.params());
        if let Some(g) = &self.gsrm {
            out.extend(g.params());
        }
        for stage in &self.encoder {
            out.extend(stage.params());
        }
        for d in &self.downs {
            out.extend(d.params());
        }
        for dec in &self.decoder {
            for c in dec.up.iter().chain(&dec.fuse) {
                out.extend(c.params());
            }
            out.extend(dec.stage.params());
        }
        out.extend(self.time_fc1.params());
        out.extend(self.time_fc2.params());
        out.push(&self.norm_scale);
        out.push(&self.norm_shift);
        out.extend(self.final_conv.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.phi.params_mut();
        out.extend(self.stem_rgb.params_mut());
        out.extend(self.stem_noise.params_mut());
        if let Some(g) = &mut self.gsrm {
            out.extend(g.params_mut());
        }
        for stage in &mut self.encoder {
            out.extend(stage.params_mut());
        }
        for d in &mut self.downs {
            out.extend(d.params_mut());
        }
        for dec in &mut self.decoder {
            for c in dec.up.iter_mut().chain(dec.fuse.iter_mut()) {
                out.extend(c.params_mut());
            }
            out.extend(dec.stage.params_mut());
        }
        out.extend(self.time_fc1.params_mut());
        out.extend(self.time_fc2.params_mut());
        out.push(&mut self.norm_scale);
        out.push(&mut self.norm_shift);
        out.extend(self.final_conv.params_mut());
        out
    }

    fn layer_kinds(&self) -> Vec<LayerKind> {
        let mut out = vec![LayerKind::Conv; 3];
        if let Some(g) = &self.gsrm {
            out.extend(g.layer_kinds());
        }
        for stage in &self.encoder {
            out.extend(stage.layer_kinds());
        }
        out.extend(vec![LayerKind::Conv; self.downs.len()]);
        for dec in &self.decoder {
            out.extend(dec.up.iter().chain(&dec.fuse).map(|_| LayerKind::Conv));
            out.extend(dec.stage.layer_kinds());
        }
        out.extend([LayerKind::Linear, LayerKind::Linear, LayerKind::Normalization, LayerKind::Conv]);
        out
    }
}

impl X0Predictor for DenoiserModel {
    fn bands(&self) -> usize {
        self.config.bands
    }

    fn predict_x0(&self, x_t: &Tensor, x_rgb: &Tensor, t: usize) -> Result<Tensor> {
        predict(self, x_t, x_rgb, t)
    }
}

/// `x̂_0 = φ(x_rgb)` alone, ignoring the noisy state: the reference predictor
/// the full model has to beat.
#[derive(Debug, Clone)]
pub struct BaseEstimator {
    pub phi: Conv2d,
}

impl BaseEstimator {
    pub fn new(bands: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            phi: Conv2d::new("phi", RGB_CHANNELS, bands, 3, Conv2dOptions::same(3), &mut rng),
        }
    }
}

impl Denoiser for BaseEstimator {
    fn bands(&self) -> usize {
        self.phi.out_channels()
    }

    fn forward(&self, tape: &mut Tape, _x_t: Var, x_rgb: Var, _t: usize) -> Result<Var> {
        self.phi.forward(tape, x_rgb)
    }
}

impl Module for BaseEstimator {
    fn params(&self) -> Vec<&Parameter> {
        self.phi.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.phi.params_mut()
    }

    fn layer_kinds(&self) -> Vec<LayerKind> {
        vec![LayerKind::Conv]
    }
}

impl X0Predictor for BaseEstimator {
    fn bands(&self) -> usize {
        self.phi.out_channels()
    }

    fn predict_x0(&self, x_t: &Tensor, x_rgb: &Tensor, t: usize) -> Result<Tensor> {
        predict(self, x_t, x_rgb, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_embedding_reference_values() {
        let e0 = time_embedding(0, 6);
        assert_eq!(e0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e1 = time_embedding(1, 4);
        let f = 10000f64.powf(-0.5);
        let want = [1f64.sin(), 1f64.cos(), f.sin(), f.cos()];
        for (a, b) in e1.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(time_embedding(3, 8)[0], 3f64.sin());
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let cfg = DenoiserConfig {
            channel_multipliers: vec![1, 2],
            use_hata: false,
            ..DenoiserConfig::default()
        };
        let mut back = DenoiserConfig::default();
        for (k, v) in cfg.to_kv() {
            assert!(back.set(&k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("unknown", "1").unwrap());
        assert!(back.set("bands", "x").is_err());
    }

    #[test]
    fn rejects_indivisible_spatial_size() {
        let model = DenoiserModel::new(
            DenoiserConfig {
                base_channels: 4,
                bands: 5,
                time_embed_dim: 8,
                ..DenoiserConfig::default()
            },
            0,
        )
        .unwrap();
        let err = predict(&model, &Tensor::zeros(&[5, 6, 8]), &Tensor::zeros(&[3, 6, 8]), 1).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    fn tiny() -> DenoiserModel {
        DenoiserModel::new(
            DenoiserConfig {
                base_channels: 6,
                bands: 5,
                time_embed_dim: 8,
                ..DenoiserConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn default_model_parameter_budget() {
        let model = DenoiserModel::new(DenoiserConfig::default(), 0).unwrap();
        let n = model.count_params();
        assert!((300_000..=900_000).contains(&n), "{n}");
    }

    #[test]
    fn fresh_model_returns_base_estimate() {
        let model = tiny();
        let rgb = Tensor::from_fn(&[3, 8, 8], |i| (i as f64 * 0.37).sin());
        let x_t = Tensor::from_fn(&[5, 8, 8], |i| (i as f64 * 0.11).cos());
        let out = predict(&model, &x_t, &rgb, 2).unwrap();
        let mut tape = Tape::new();
        let r = tape.constant(rgb);
        let base = model.base_estimate(&mut tape, r).unwrap();
        assert_eq!(out.max_abs_diff(tape.value(base)), 0.0);
    }

    #[test]
    fn analytic_macs_match_recorded_macs() {
        for (gsrm, hata) in [(true, true), (false, true), (true, false)] {
            let mut cfg = tiny().config().clone();
            cfg.use_gsrm = gsrm;
            cfg.use_hata = hata;
            let model = DenoiserModel::new(cfg, 1).unwrap();
            let mut tape = Tape::new();
            let x_t = tape.constant(Tensor::zeros(&[5, 8, 12]));
            let rgb = tape.constant(Tensor::zeros(&[3, 8, 12]));
            model.forward(&mut tape, x_t, rgb, 1).unwrap();
            assert_eq!(tape.macs(), model.macs_per_forward(8, 12));
            assert_eq!(model.count_flops(8, 12, 5), 10 * tape.macs());
        }
    }

    #[test]
    fn exactly_one_normalization_layer() {
        let model = DenoiserModel::new(DenoiserConfig::default(), 0).unwrap();
        let norms = model.layer_kinds().iter().filter(|k| **k == LayerKind::Normalization).count();
        assert_eq!(norms, 1);
    }
}
