//! Parameterized layers shared by the denoiser's sub-modules.

use r2h_tensor::{Conv2dOptions, Parameter, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Structural categories reported by [`Module::layer_kinds`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    Linear,
    Normalization,
    Attention,
}

pub trait Module {
    fn params(&self) -> Vec<&Parameter>;

    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn layer_kinds(&self) -> Vec<LayerKind>;

    fn num_params(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }
}

/// Uniform `±1/√fan_in` initialization.
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: Conv2dOptions,
        rng: &mut impl Rng,
    ) -> Self {
        let per_group = in_channels / opts.groups;
        let shape = [out_channels, per_group, kernel, kernel];
        let weight = fan_in_uniform(&shape, per_group * kernel * kernel, rng);
        Self::from_weight(name, weight, opts)
    }

    /// Depthwise `k×k` convolution with stride 1 and zero "same" padding.
    pub fn depthwise(name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self::new(
            name,
            channels,
            channels,
            kernel,
            Conv2dOptions::same(kernel).with_groups(channels),
            rng,
        )
    }

    pub fn zeros(name: &str, in_channels: usize, out_channels: usize, kernel: usize, opts: Conv2dOptions) -> Self {
        let weight = Tensor::zeros(&[out_channels, in_channels / opts.groups, kernel, kernel]);
        Self::from_weight(name, weight, opts)
    }

    fn from_weight(name: &str, weight: Tensor, opts: Conv2dOptions) -> Self {
        let out_channels = weight.shape()[0];
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            opts,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.tensor.shape()[1] * self.opts.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.tensor.shape()[2]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        Ok(tape.conv2d(x, w, Some(b), self.opts)?)
    }

    /// Output spatial size for an input of `h × w`.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let out = |n| r2h_tensor::conv_output_len(n, k, self.opts.stride, self.opts.padding).unwrap_or(0);
        (out(h), out(w))
    }

    /// Multiply-accumulates for one `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w);
        (self.weight.numel() * oh * ow) as u64
    }

    pub fn kind(&self) -> LayerKind {
        if self.opts.groups > 1 && self.opts.groups == self.in_channels() {
            LayerKind::DepthwiseConv
        } else {
            LayerKind::Conv
        }
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn layer_kinds(&self) -> Vec<LayerKind> {
        vec![self.kind()]
    }
}

/// Affine map on row vectors: `[1, in] → [1, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), fan_in_uniform(&[input, output], input, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[1, output])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let xw = tape.matmul(x, w)?;
        Ok(tape.add(xw, b)?)
    }

    pub fn macs(&self) -> u64 {
        self.weight.numel() as u64
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn layer_kinds(&self) -> Vec<LayerKind> {
        vec![LayerKind::Linear]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pointwise_conv_param_count_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = 31;
        let conv = Conv2d::new("p", c, c, 1, Conv2dOptions::default(), &mut rng);
        assert_eq!(conv.num_params(), c * c + c);
    }

    #[test]
    fn init_respects_fan_in_bound_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new("c", 4, 6, 3, Conv2dOptions::same(3), &mut rng);
        let bound = 1.0 / 36f64.sqrt();
        assert!(conv.weight.tensor.max_abs() <= bound);
        assert_eq!(conv.bias.tensor.max_abs(), 0.0);
        assert_eq!(conv.weight.name, "c.weight");
        let dw = Conv2d::depthwise("d", 5, 3, &mut rng);
        assert_eq!(dw.kind(), LayerKind::DepthwiseConv);
        assert_eq!(dw.num_params(), 5 * 9 + 5);
    }
}
