//! Central finite-difference verification of [`Tape::backward`].
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Perturbation applied on each side of the probed entry.
    pub step: f64,
    /// Probe at most this many entries per input (evenly strided); `None` probes all.
    pub max_entries: Option<usize>,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Worst relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub probes: usize,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares analytic and central-difference gradients of `f` with respect to
/// every input.
///
/// Non-scalar outputs are reduced to `sum(out ⊙ r)` with a fixed pseudo-random
/// `r`, so every output element contributes to the checked gradient.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, 1e-3·s, 1e-12)`
/// where `s` is the largest numeric gradient magnitude seen on that input;
/// the floor keeps round-off on near-zero entries from dominating.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: FdConfig, f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = project(&mut tape, out)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probes = 0;
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let stride = cfg.max_entries.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut pairs = Vec::new();
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            pairs.push((analytic.data()[j], (plus - minus) / (2.0 * cfg.step)));
            probes += 1;
        }
        per_input.push(worst_relative_error(&pairs));
    }
    Ok(FdReport { per_input, probes })
}

/// Worst `|a - n| / max(|a|, |n|, 1e-3·s, 1e-12)` over `(analytic, numeric)`
/// pairs, where `s` is the largest numeric magnitude among them.
pub fn worst_relative_error(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().fold(0.0f64, |m, &(_, num)| m.max(num.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    pairs
        .iter()
        .map(|&(a, num)| (a - num).abs() / a.abs().max(num.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Reduces a non-scalar output to `sum(out ⊙ r)` with fixed weights `r`.
pub fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let weights = tape.constant(projection_weights(&shape));
    let weighted = tape.mul(out, weights)?;
    tape.sum(weighted)
}

/// Deterministic weights in `[-1.5, -0.5] ∪ [0.5, 1.5]`.
pub fn projection_weights(shape: &[usize]) -> Tensor {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    Tensor::from_fn(shape, |_| {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        let u = (z >> 11) as f64 / (1u64 << 53) as f64;
        let magnitude = 0.5 + u;
        if z & 1 == 0 {
            magnitude
        } else {
            -magnitude
        }
    })
}
