//! Finite-difference suite over every differentiable primitive, each
//! composite module (GSRM, HATA, losses) and the full denoiser.

use std::time::{Duration, Instant};

use r2h_tensor::gradcheck::{check_gradients, project, worst_relative_error, FdConfig};
use r2h_tensor::{Conv2dOptions, PadMode, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserModel};
use crate::error::Result;
use crate::gsrm::Gsrm;
use crate::hata::Hata;
use crate::loss::{gradient_loss, mse, total_loss, LossConfig};
use crate::nn::Module;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODULE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckGroup {
    Primitive,
    Module,
    EndToEnd,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub group: CheckGroup,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub outcomes: Vec<CheckOutcome>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed()).collect()
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Gives every parameter a small random value so that no path is
/// short-circuited by a zero initialization.
pub fn randomize_params(model: &mut impl Module, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v += scale * rng.gen_range(-1.0..1.0));
    }
}

/// Compares parameter gradients from the tape with central differences,
/// probing at most `per_param` evenly strided entries of each parameter.
pub fn check_param_gradients<M, F>(model: &M, cfg: FdConfig, per_param: usize, f: F) -> Result<(f64, usize)>
where
    M: Module + Clone,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(m, &mut tape)?;
        let l = project(&mut tape, out)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let out = f(model, &mut tape)?;
    let l = project(&mut tape, out)?;
    let grads = tape.backward(l)?;

    let names: Vec<(String, usize)> = model
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.numel()))
        .collect();
    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (name, n) in names {
        let analytic = grads.param(&name).cloned().unwrap_or_else(|| Tensor::zeros(&[n]));
        let stride = n.div_ceil(per_param.max(1));
        let mut pairs = Vec::new();
        for j in (0..n).step_by(stride) {
            let set = |m: &mut M, delta: f64| {
                let p = m.params_mut().into_iter().find(|p| p.name == name).expect("parameter exists");
                p.tensor.data_mut()[j] += delta;
            };
            set(&mut work, cfg.step);
            let plus = eval(&work)?;
            set(&mut work, -2.0 * cfg.step);
            let minus = eval(&work)?;
            set(&mut work, cfg.step);
            pairs.push((analytic.data()[j], (plus - minus) / (2.0 * cfg.step)));
            probes += 1;
        }
        worst = worst.max(worst_relative_error(&pairs));
    }
    Ok((worst, probes))
}

type Primitive = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> r2h_tensor::Result<Var>>);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let a = random(&[2, 3, 4], rng);
    let b = random(&[2, 3, 4], rng);
    let x = random(&[4, 6, 6], rng);
    let c3 = random(&[3, 4, 4], rng);
    let m1 = random(&[3, 5], rng);
    let m2 = random(&[5, 4], rng);
    let mut cases: Vec<Primitive> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("add_scalar", vec![a.clone()], Box::new(|t, v| t.add_scalar(v[0], 0.3))),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("mul_scalar", vec![c3.clone(), random(&[1], rng)], Box::new(|t, v| t.mul_scalar(v[0], v[1]))),
        (
            "add_channel_bias",
            vec![c3.clone(), random(&[3], rng)],
            Box::new(|t, v| t.add_channel_bias(v[0], v[1])),
        ),
        ("mul_channel", vec![c3.clone(), random(&[3], rng)], Box::new(|t, v| t.mul_channel(v[0], v[1]))),
        ("gelu", vec![a.clone()], Box::new(|t, v| t.gelu(v[0]))),
        ("silu", vec![a.clone()], Box::new(|t, v| t.silu(v[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        ("matmul", vec![m1.clone(), m2], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![m1], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], &[6, 4]))),
        (
            "concat",
            vec![a.clone(), random(&[2, 5, 4], rng)],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        ("slice", vec![a.clone()], Box::new(|t, v| t.slice(v[0], 2, 1, 2))),
        (
            "chunk",
            vec![a.clone()],
            Box::new(|t, v| {
                let p = t.chunk(v[0], 3, 1)?;
                let m = t.mul(p[0], p[2])?;
                t.add(m, p[1])
            }),
        ),
        ("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
        ("upsample2x", vec![a], Box::new(|t, v| t.upsample2x(v[0]))),
        ("standardize", vec![c3.clone()], Box::new(|t, v| t.standardize(v[0], 1e-5))),
        (
            "conv2d/3x3",
            vec![x.clone(), random(&[3, 4, 3, 3], rng), random(&[3], rng)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dOptions::same(3))),
        ),
        (
            "conv2d/stride2",
            vec![x.clone(), random(&[2, 4, 3, 3], rng), random(&[2], rng)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dOptions::same(3).with_stride(2))),
        ),
        (
            "conv2d/1x1",
            vec![x.clone(), random(&[5, 4, 1, 1], rng), random(&[5], rng)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dOptions::default())),
        ),
        (
            "conv2d/depthwise",
            vec![x.clone(), random(&[4, 1, 3, 3], rng), random(&[4], rng)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dOptions::same(3).with_groups(4))),
        ),
        (
            "conv2d/grouped-reflect",
            vec![x, random(&[2, 2, 3, 3], rng)],
            Box::new(|t, v| {
                let opts = Conv2dOptions::same(3).with_groups(2).with_pad_mode(PadMode::Reflect);
                t.conv2d(v[0], v[1], None, opts)
            }),
        ),
    ];
    for axis in 0..3 {
        let names = ["softmax/axis0", "softmax/axis1", "softmax/axis2"];
        cases.push((names[axis], vec![c3.clone()], Box::new(move |t, v| t.softmax(v[0], axis))));
        let names = ["l2_normalize/axis0", "l2_normalize/axis1", "l2_normalize/axis2"];
        cases.push((
            names[axis],
            vec![c3.clone()],
            Box::new(move |t, v| t.l2_normalize(v[0], axis, 1e-6)),
        ));
    }
    cases
}

fn outcome(name: &str, group: CheckGroup, tolerance: f64, err: f64, probes: usize) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        group,
        max_rel_error: err,
        tolerance,
        probes,
    }
}

/// Runs every check; `seed` fixes all random inputs and parameters.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fd = FdConfig::default();
    let mut outcomes = Vec::new();

    for (name, inputs, f) in primitive_cases(&mut rng) {
        let report = check_gradients(&inputs, fd, |t, v| f(t, v))?;
        outcomes.push(outcome(name, CheckGroup::Primitive, PRIMITIVE_TOL, report.max_rel_error(), report.probes));
    }

    let c = 4;
    let x1 = random(&[c, 5, 5], &mut rng);
    let x2 = random(&[c, 5, 5], &mut rng);
    let mut gsrm = Gsrm::new("gsrm", c, &mut rng);
    randomize_params(&mut gsrm, 0.1, seed ^ 1);
    let r = check_gradients(&[x1.clone(), x2.clone()], fd, |t, v| {
        gsrm.forward(t, v[0], v[1]).map_err(into_tensor_err)
    })?;
    outcomes.push(outcome("gsrm/inputs", CheckGroup::Module, MODULE_TOL, r.max_rel_error(), r.probes));
    let (e, p) = check_param_gradients(&gsrm, fd, 8, |m, t| {
        let (a, b) = (t.constant(x1.clone()), t.constant(x2.clone()));
        m.forward(t, a, b)
    })?;
    outcomes.push(outcome("gsrm/params", CheckGroup::Module, MODULE_TOL, e, p));

    let mut hata = Hata::new("hata", c, &mut rng);
    randomize_params(&mut hata, 0.1, seed ^ 2);
    let r = check_gradients(std::slice::from_ref(&x1), fd, |t, v| hata.forward(t, v[0]).map_err(into_tensor_err))?;
    outcomes.push(outcome("hata/inputs", CheckGroup::Module, MODULE_TOL, r.max_rel_error(), r.probes));
    let (e, p) = check_param_gradients(&hata, fd, 8, |m, t| {
        let a = t.constant(x1.clone());
        m.forward(t, a)
    })?;
    outcomes.push(outcome("hata/params", CheckGroup::Module, MODULE_TOL, e, p));

    let pred = random(&[3, 6, 6], &mut rng);
    let target = random(&[3, 6, 6], &mut rng);
    let pair = [pred, target];
    let r = check_gradients(&pair, fd, |t, v| mse(t, v[0], v[1]).map_err(into_tensor_err))?;
    outcomes.push(outcome("loss/mse", CheckGroup::Module, MODULE_TOL, r.max_rel_error(), r.probes));
    let r = check_gradients(&pair, fd, |t, v| gradient_loss(t, v[0], v[1]).map_err(into_tensor_err))?;
    outcomes.push(outcome("loss/gradient", CheckGroup::Module, MODULE_TOL, r.max_rel_error(), r.probes));
    let cfg = LossConfig { lambda: 0.7 };
    let r = check_gradients(&pair, fd, |t, v| total_loss(t, v[0], v[1], &cfg).map_err(into_tensor_err))?;
    outcomes.push(outcome("loss/total", CheckGroup::Module, MODULE_TOL, r.max_rel_error(), r.probes));

    let mut model = DenoiserModel::new(DenoiserConfig::default(), seed)?;
    randomize_params(&mut model, 0.05, seed ^ 3);
    let bands = model.config().bands;
    let x_t = random(&[bands, 8, 8], &mut rng);
    let x_rgb = random(&[3, 8, 8], &mut rng).map(|v| 0.5 + 0.5 * v);
    let t = 3;
    let limited = FdConfig {
        max_entries: Some(48),
        ..fd
    };
    let r = check_gradients(&[x_t.clone(), x_rgb.clone()], limited, |tape, v| {
        model.forward(tape, v[0], v[1], t).map_err(into_tensor_err)
    })?;
    outcomes.push(outcome("denoiser/inputs", CheckGroup::EndToEnd, END_TO_END_TOL, r.max_rel_error(), r.probes));
    let (e, p) = check_param_gradients(&model, fd, 2, |m, tape| {
        let (a, b) = (tape.constant(x_t.clone()), tape.constant(x_rgb.clone()));
        m.forward(tape, a, b, t)
    })?;
    outcomes.push(outcome("denoiser/params", CheckGroup::EndToEnd, END_TO_END_TOL, e, p));

    Ok(SuiteReport {
        outcomes,
        elapsed: start.elapsed(),
    })
}

fn into_tensor_err(e: crate::error::Error) -> r2h_tensor::TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => r2h_tensor::TensorError::InvalidArgument {
            op: "module",
            detail: other.to_string(),
        },
    }
}
