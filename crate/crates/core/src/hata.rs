//! Transposed (channel-wise) attention with a gated local branch.
//!
//! For a `[C, H, W]` input, a pointwise projection yields Q, K and V. Q and K
//! are flattened to `C × HW`, L2-normalized along HW, and produce a `C × C`
//! map `A = softmax(Q̂·K̂ᵀ / α)` (softmax over key channels). The attention
//! output is `out_proj(A·V)`. In parallel, `X_lpe = DW(GELU(DW(V)))`, and
//! the block returns `X_attn ⊙ σ(X_lpe) + X_lpe`.
//!
//! The cost of the attention core is `O(HW·C²)`: the map never grows with
//! spatial size.

use r2h_tensor::{Conv2dOptions, Parameter, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerKind, Module};

/// Stabilizer for the Q/K normalization along the spatial axis.
pub const QK_EPS: f64 = 1e-12;

/// Tape primitives that make up the attention core, for operation counting.
pub const ATTENTION_CORE_OPS: [&str; 5] = ["l2_normalize", "transpose", "matmul", "mul_scalar", "softmax"];

#[derive(Debug, Clone)]
pub struct Hata {
    pub qkv: Conv2d,
    /// Temperature stored as `log α` so that `α = exp(log α) > 0`.
    pub log_alpha: Parameter,
    pub lpe_dw1: Conv2d,
    pub lpe_dw2: Conv2d,
    pub out_proj: Conv2d,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HataVars {
    pub attention: Var,
    pub attn_out: Var,
    pub lpe: Var,
    pub output: Var,
}

impl Hata {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            qkv: Conv2d::new(&format!("{name}.qkv"), channels, 3 * channels, 1, Conv2dOptions::default(), rng),
            log_alpha: Parameter::new(format!("{name}.log_alpha"), Tensor::zeros(&[1])),
            lpe_dw1: Conv2d::depthwise(&format!("{name}.lpe_dw1"), channels, 3, rng),
            lpe_dw2: Conv2d::depthwise(&format!("{name}.lpe_dw2"), channels, 3, rng),
            out_proj: Conv2d::new(&format!("{name}.out_proj"), channels, channels, 1, Conv2dOptions::default(), rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.out_proj.out_channels()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.tensor.data()[0].exp()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, x)?.output)
    }

    pub fn forward_parts(&self, tape: &mut Tape, x: Var) -> Result<HataVars> {
        let &[c, h, w] = tape.shape(x) else {
            return Err(Error::invalid(format!("HATA expects [C, H, W], got {:?}", tape.shape(x))));
        };
        let qkv = self.qkv.forward(tape, x)?;
        let parts = tape.chunk(qkv, 3, 0)?;
        let (q, k, v) = (parts[0], parts[1], parts[2]);

        let q = tape.reshape(q, &[c, h * w])?;
        let k = tape.reshape(k, &[c, h * w])?;
        let v_flat = tape.reshape(v, &[c, h * w])?;
        let q = tape.l2_normalize(q, 1, QK_EPS)?;
        let k = tape.l2_normalize(k, 1, QK_EPS)?;
        let k_t = tape.transpose(k)?;
        let logits = tape.matmul(q, k_t)?;
        let log_alpha = tape.param(&self.log_alpha);
        let neg = tape.scale(log_alpha, -1.0)?;
        let inv_alpha = tape.exp(neg)?;
        let logits = tape.mul_scalar(logits, inv_alpha)?;
        let attention = tape.softmax(logits, 1)?;
        let mixed = tape.matmul(attention, v_flat)?;
        let mixed = tape.reshape(mixed, &[c, h, w])?;
        let attn_out = self.out_proj.forward(tape, mixed)?;

        let lpe = self.lpe_dw1.forward(tape, v)?;
        let lpe = tape.gelu(lpe)?;
        let lpe = self.lpe_dw2.forward(tape, lpe)?;
        let gate = tape.sigmoid(lpe)?;
        let gated = tape.mul(attn_out, gate)?;
        let output = tape.add(gated, lpe)?;
        Ok(HataVars {
            attention,
            attn_out,
            lpe,
            output,
        })
    }

    /// Multiply-accumulates of convolutions and matrix products for one pass.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.channels() as u64;
        let hw = (h * w) as u64;
        let convs = self.qkv.macs(h, w) + self.lpe_dw1.macs(h, w) + self.lpe_dw2.macs(h, w) + self.out_proj.macs(h, w);
        // Q̂·K̂ᵀ and A·V
        convs + 2 * c * c * hw
    }
}

/// Sum of the attention-core entries in a tape's operation counts.
pub fn attention_core_op_count(tape: &Tape) -> u64 {
    ATTENTION_CORE_OPS
        .iter()
        .map(|k| tape.op_counts().get(k).copied().unwrap_or(0))
        .sum()
}

impl Module for Hata {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.qkv.params();
        out.push(&self.log_alpha);
        for conv in [&self.lpe_dw1, &self.lpe_dw2, &self.out_proj] {
            out.extend(conv.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.qkv.params_mut();
        out.push(&mut self.log_alpha);
        out.extend(self.lpe_dw1.params_mut());
        out.extend(self.lpe_dw2.params_mut());
        out.extend(self.out_proj.params_mut());
        out
    }

    fn layer_kinds(&self) -> Vec<LayerKind> {
        vec![
            LayerKind::Conv,
            LayerKind::Attention,
            LayerKind::DepthwiseConv,
            LayerKind::DepthwiseConv,
            LayerKind::Conv,
        ]
    }
}
