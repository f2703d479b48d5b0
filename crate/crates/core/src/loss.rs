//! Training objective: pixel MSE plus a Sobel gradient term.

use r2h_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const SOBEL_H: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_V: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the gradient term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SobelDirection {
    Horizontal,
    Vertical,
}

impl SobelDirection {
    pub fn kernel(self) -> &'static [f64; 9] {
        match self {
            Self::Horizontal => &SOBEL_H,
            Self::Vertical => &SOBEL_V,
        }
    }
}

fn check_same(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::invalid(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean of `(x̂ - x)²` over every element.
pub fn mse(tape: &mut Tape, x0_hat: Var, x0: Var) -> Result<Var> {
    check_same(tape, x0_hat, x0)?;
    let d = tape.sub(x0_hat, x0)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

/// Pads one element on each side of `axis` by mirroring (`x[1]`, `x[n-2]`).
fn reflect_pad(tape: &mut Tape, x: Var, axis: usize) -> Result<Var> {
    let n = tape.shape(x)[axis];
    if n < 2 {
        return Err(Error::invalid(format!("reflect padding needs at least 2 samples along axis {axis}")));
    }
    let lo = tape.slice(x, axis, 1, 1)?;
    let hi = tape.slice(x, axis, n - 2, 1)?;
    Ok(tape.concat(&[lo, x, hi], axis)?)
}

/// Per-band Sobel response of a `[B, H, W]` map, reflect padded.
///
/// Evaluated in separable form: a central difference along the derivative
/// axis followed by `[1, 2, 1]` smoothing along the other, so constant
/// regions give exactly zero.
pub fn sobel(tape: &mut Tape, x: Var, dir: SobelDirection) -> Result<Var> {
    let &[_, h, w] = tape.shape(x) else {
        return Err(Error::invalid(format!("Sobel expects [B, H, W], got {:?}", tape.shape(x))));
    };
    let (diff_axis, smooth_axis) = match dir {
        SobelDirection::Horizontal => (2, 1),
        SobelDirection::Vertical => (1, 2),
    };
    let len = |axis: usize| if axis == 1 { h } else { w };
    let p = reflect_pad(tape, x, diff_axis)?;
    let ahead = tape.slice(p, diff_axis, 2, len(diff_axis))?;
    let behind = tape.slice(p, diff_axis, 0, len(diff_axis))?;
    let d = tape.sub(ahead, behind)?;
    let p = reflect_pad(tape, d, smooth_axis)?;
    let n = len(smooth_axis);
    let (a, b, c) = (
        tape.slice(p, smooth_axis, 0, n)?,
        tape.slice(p, smooth_axis, 1, n)?,
        tape.slice(p, smooth_axis, 2, n)?,
    );
    let b2 = tape.scale(b, 2.0)?;
    let ab = tape.add(a, b2)?;
    Ok(tape.add(ab, c)?)
}

/// `Σ_{d ∈ {h, v}} mean((S_d x̂ - S_d x)²)`.
pub fn gradient_loss(tape: &mut Tape, x0_hat: Var, x0: Var) -> Result<Var> {
    check_same(tape, x0_hat, x0)?;
    let d = tape.sub(x0_hat, x0)?;
    let mut terms = Vec::with_capacity(2);
    for dir in [SobelDirection::Horizontal, SobelDirection::Vertical] {
        let r = sobel(tape, d, dir)?;
        let sq = tape.mul(r, r)?;
        terms.push(tape.mean(sq)?);
    }
    Ok(tape.add(terms[0], terms[1])?)
}

/// `mse + λ·gradient_loss`; with `λ = 0` the gradient term is not recorded.
pub fn total_loss(tape: &mut Tape, x0_hat: Var, x0: Var, cfg: &LossConfig) -> Result<Var> {
    let m = mse(tape, x0_hat, x0)?;
    if cfg.lambda == 0.0 {
        return Ok(m);
    }
    let g = gradient_loss(tape, x0_hat, x0)?;
    let g = tape.scale(g, cfg.lambda)?;
    Ok(tape.add(m, g)?)
}

fn eval_pair(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = f(&mut tape, va, vb)?;
    Ok(tape.value(out).data()[0])
}

pub fn mse_value(x0_hat: &Tensor, x0: &Tensor) -> Result<f64> {
    eval_pair(x0_hat, x0, mse)
}

pub fn gradient_loss_value(x0_hat: &Tensor, x0: &Tensor) -> Result<f64> {
    eval_pair(x0_hat, x0, gradient_loss)
}

pub fn total_loss_value(x0_hat: &Tensor, x0: &Tensor, cfg: &LossConfig) -> Result<f64> {
    eval_pair(x0_hat, x0, |t, a, b| total_loss(t, a, b, cfg))
}

pub fn sobel_value(x: &Tensor, dir: SobelDirection) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = sobel(&mut tape, v, dir)?;
    Ok(tape.value(out).clone())
}
