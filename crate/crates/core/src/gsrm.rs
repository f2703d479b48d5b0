//! Guided spectral refinement: fuses RGB-conditioned features with
//! noisy-state features.
//!
//! Both streams are L2-normalized per pixel across channels, concatenated,
//! and passed through a `1×1 → GELU → depthwise 3×3 → GELU → 1×1`
//! bottleneck.

use r2h_tensor::{Parameter, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerKind, Module};
use r2h_tensor::Conv2dOptions;

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Gsrm {
    pub conv_in: Conv2d,
    pub dw: Conv2d,
    pub conv_out: Conv2d,
    pub eps: f64,
}

impl Gsrm {
    /// `channels → 2·channels → channels` bottleneck.
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self::with_mid(name, channels, 2 * channels, rng)
    }

    pub fn with_mid(name: &str, channels: usize, mid: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv_in: Conv2d::new(&format!("{name}.conv_in"), 2 * channels, mid, 1, Conv2dOptions::default(), rng),
            dw: Conv2d::depthwise(&format!("{name}.dw"), mid, 3, rng),
            conv_out: Conv2d::new(&format!("{name}.conv_out"), mid, channels, 1, Conv2dOptions::default(), rng),
            eps: DEFAULT_EPS,
        }
    }

    /// Per-pixel normalization of a `[C, H, W]` feature map.
    pub fn normalize(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        Ok(tape.l2_normalize(f, 0, self.eps)?)
    }

    pub fn forward(&self, tape: &mut Tape, f_rgb: Var, f_noise: Var) -> Result<Var> {
        let (a, b) = (tape.shape(f_rgb), tape.shape(f_noise));
        if a != b || a.len() != 3 {
            return Err(Error::invalid(format!(
                "GSRM inputs must share a [C, H, W] shape, got {a:?} and {b:?}"
            )));
        }
        let rgb = self.normalize(tape, f_rgb)?;
        let noise = self.normalize(tape, f_noise)?;
        let joint = tape.concat(&[rgb, noise], 0)?;
        let h = self.conv_in.forward(tape, joint)?;
        let h = tape.gelu(h)?;
        let h = self.dw.forward(tape, h)?;
        let h = tape.gelu(h)?;
        self.conv_out.forward(tape, h)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv_in.macs(h, w) + self.dw.macs(h, w) + self.conv_out.macs(h, w)
    }
}

impl Module for Gsrm {
    fn params(&self) -> Vec<&Parameter> {
        [&self.conv_in, &self.dw, &self.conv_out].into_iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.conv_in.params_mut();
        out.extend(self.dw.params_mut());
        out.extend(self.conv_out.params_mut());
        out
    }

    fn layer_kinds(&self) -> Vec<LayerKind> {
        vec![LayerKind::Conv, LayerKind::DepthwiseConv, LayerKind::Conv]
    }
}
