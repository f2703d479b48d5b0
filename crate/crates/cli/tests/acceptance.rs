#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::process::Command;
use std::time::{Duration, Instant};

use r2h_core::denoiser::predict;
use r2h_core::gradcheck::{self, randomize_params, CheckGroup};
use r2h_core::hata::{attention_core_op_count, Hata};
use r2h_core::loss::{gradient_loss_value, mse_value, sobel_value, total_loss_value, LossConfig, SobelDirection};
use r2h_core::metrics::{mrae, psnr, rmse, sam, Metrics};
use r2h_core::nn::{LayerKind, Module};
use r2h_core::{fit, reconstruct, BaseEstimator, Dataset, DenoiserConfig, DenoiserModel, NoiseSchedule, SamplerConfig, TrainConfig};
use r2h_tensor::{Tape, Tensor};
use support::{hata_oracle, rng, uniform, GroundTruth};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_suite() -> Outcome {
    let report = gradcheck::run_suite(0).map_err(|e| e.to_string())?;
    for o in &report.outcomes {
        let bound = match o.group {
            CheckGroup::Primitive | CheckGroup::Module => 1e-4,
            CheckGroup::EndToEnd => 1e-3,
        };
        ensure(o.tolerance <= bound, format!("{} checked at {:e}, bound {bound:e}", o.name, o.tolerance))?;
    }
    if let Some(f) = report.failures().first() {
        return Err(format!("{} rel error {:.3e} >= {:.0e}", f.name, f.max_rel_error, f.tolerance));
    }
    ensure(report.elapsed < Duration::from_secs(120), format!("took {:.1?}", report.elapsed))?;
    let worst = |g: CheckGroup| {
        report.outcomes.iter().filter(|o| o.group == g).map(|o| o.max_rel_error).fold(0.0, f64::max)
    };
    Ok(format!(
        "{} checks, worst primitive {:.2e}, module {:.2e}, end-to-end {:.2e}, {:.1?}",
        report.outcomes.len(),
        worst(CheckGroup::Primitive),
        worst(CheckGroup::Module),
        worst(CheckGroup::EndToEnd),
        report.elapsed
    ))
}

fn schedule_identities() -> Outcome {
    let mut worst = 0.0f64;
    for (steps, delta) in [(5, 0.01), (20, 0.001), (1, 0.1)] {
        let s = NoiseSchedule::new(steps, delta).map_err(|e| e.to_string())?;
        ensure(s.sqrt_alphabar(0) == 1.0, format!("T={steps}: sqrt_alphabar_0 = {}", s.sqrt_alphabar(0)))?;
        ensure(s.sqrt_alphabar(steps) == delta, format!("T={steps}: sqrt_alphabar_T = {}", s.sqrt_alphabar(steps)))?;
        let mut prod = 1.0;
        for t in 1..=steps {
            let a = s.alpha(t);
            ensure(a > 0.0 && a < 1.0, format!("T={steps}: alpha_{t} = {a}"))?;
            prod *= a;
            worst = worst.max((prod - s.alphabar(t)).abs());
        }
    }
    ensure(worst < 1e-12, format!("product error {worst:e}"))?;
    Ok(format!("3 schedules, max |prod alpha - alphabar| = {worst:.1e}"))
}

fn oracle_exactness() -> Outcome {
    let mut r = rng(100);
    let mut worst = 0.0f64;
    for steps in [1, 2, 5, 20] {
        let mut cfg = SamplerConfig::new(NoiseSchedule::new(steps, 0.01).map_err(|e| e.to_string())?);
        cfg.clamp_output = false;
        for seed in 0..5 {
            let x0 = uniform(&[31, 6, 6], 0.0, 1.0, &mut r);
            let stub = GroundTruth::new(x0.clone());
            let out = reconstruct(&Tensor::zeros(&[3, 6, 6]), &stub, &cfg, seed).map_err(|e| e.to_string())?;
            worst = worst.max(out.hsi.max_abs_diff(&x0));
        }
    }
    ensure(worst < 1e-10, format!("max abs error {worst:e}"))?;
    Ok(format!("T in {{1,2,5,20}} x 5 seeds, max abs error {worst:.1e}"))
}

fn hata_equivalence() -> Outcome {
    let mut r = rng(200);
    let (mut worst, mut worst_row) = (0.0f64, 0.0f64);
    for trial in 0..20 {
        let mut block = Hata::new("h", 4, &mut r);
        randomize_params(&mut block, 0.2, trial);
        let x = uniform(&[4, 5, 5], -1.0, 1.0, &mut r);
        let (attn, want) = hata_oracle(&block, &x);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let parts = block.forward_parts(&mut tape, xv).map_err(|e| e.to_string())?;
        worst = worst.max(tape.value(parts.output).max_abs_diff(&want));
        let a = tape.value(parts.attention).data();
        for i in 0..4 {
            for j in 0..4 {
                worst = worst.max((a[i * 4 + j] - attn[i][j]).abs());
            }
            worst_row = worst_row.max((a[i * 4..(i + 1) * 4].iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst < 1e-10, format!("oracle mismatch {worst:e}"))?;
    ensure(worst_row <= 1e-12, format!("softmax row sum off by {worst_row:e}"))?;

    let block = Hata::new("h", 31, &mut rng(201));
    let count = |h: usize, w: usize| -> Result<f64, String> {
        let mut tape = Tape::new();
        let x = tape.constant(uniform(&[31, h, w], -1.0, 1.0, &mut rng(202)));
        block.forward(&mut tape, x).map_err(|e| e.to_string())?;
        Ok(attention_core_op_count(&tape) as f64)
    };
    let ratio = count(32, 32)? / count(16, 16)?;
    ensure((ratio / 4.0 - 1.0).abs() <= 0.01, format!("op-count ratio {ratio}"))?;
    Ok(format!(
        "20 trials max error {worst:.1e}, row sums within {worst_row:.1e}, op ratio 2Hx2W / HxW = {ratio:.4}"
    ))
}

fn init_identity() -> Outcome {
    let model = DenoiserModel::new(DenoiserConfig::default(), 7).map_err(|e| e.to_string())?;
    let rgb = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(300));
    let x_t = uniform(&[31, 8, 8], -2.0, 2.0, &mut rng(301));
    let mut tape = Tape::new();
    let rv = tape.constant(rgb.clone());
    let base = model.base_estimate(&mut tape, rv).map_err(|e| e.to_string())?;
    for t in 1..=5 {
        let out = predict(&model, &x_t, &rgb, t).map_err(|e| e.to_string())?;
        ensure(&out == tape.value(base), format!("t={t}: prediction differs from the base estimate"))?;
    }
    let norms = model.layer_kinds().iter().filter(|k| **k == LayerKind::Normalization).count();
    ensure(norms == 1, format!("{norms} normalization layers"))?;
    Ok("prediction equals base estimate bit-exactly for t = 1..5; 1 normalization layer".into())
}

fn loss_correctness() -> Outcome {
    let e = |e: r2h_core::Error| e.to_string();
    let (a, b) = (Tensor::full(&[31, 6, 6], 0.2), Tensor::full(&[31, 6, 6], 0.7));
    let g = gradient_loss_value(&a, &b).map_err(e)?;
    ensure(g == 0.0, format!("gradient loss on constants = {g:e}"))?;

    let ramp = Tensor::from_fn(&[1, 5, 6], |i| (i % 6) as f64);
    let s = sobel_value(&ramp, SobelDirection::Horizontal).map_err(e)?;
    for i in 0..5 {
        for j in 1..5 {
            let v = s.data()[i * 6 + j];
            ensure(v == 8.0, format!("ramp response at ({i},{j}) = {v}"))?;
        }
    }

    let mut r = rng(400);
    let (x, y) = (uniform(&[31, 6, 6], 0.0, 1.0, &mut r), uniform(&[31, 6, 6], 0.0, 1.0, &mut r));
    let t0 = total_loss_value(&x, &y, &LossConfig { lambda: 0.0 }).map_err(e)?;
    ensure(t0 == mse_value(&x, &y).map_err(e)?, "total loss at lambda 0 differs from mse")?;
    ensure(LossConfig::default().lambda == 1.0, "default lambda is not 1")?;
    Ok("constants give 0, ramp interior 8, lambda=0 is mse, default lambda 1".into())
}

fn metric_sanity() -> Outcome {
    let e = |e: r2h_core::Error| e.to_string();
    let x = Tensor::new(&[2], vec![1.0, 2.0]).map_err(|e| e.to_string())?;
    let y = Tensor::new(&[2], vec![1.1, 1.8]).map_err(|e| e.to_string())?;
    let m = mrae(&y, &x).map_err(e)?;
    ensure((m - 0.1).abs() <= 1e-12, format!("MRAE {m}"))?;

    let z = uniform(&[31, 6, 6], 0.05, 0.95, &mut rng(500));
    let mut worst_sam = 0.0f64;
    for k in [0.5, 2.0] {
        worst_sam = worst_sam.max(sam(&z.map(|v| v * k), &z).map_err(e)?.abs());
    }
    ensure(worst_sam <= 1e-6, format!("SAM(kx, x) = {worst_sam:e} deg"))?;

    let noisy = z.zip_map(&uniform(&[31, 6, 6], -0.05, 0.05, &mut rng(501)), |a, b| a + b).map_err(|e| e.to_string())?;
    let err = rmse(&noisy, &z).map_err(e)?;
    let p = psnr(&noisy, &z).map_err(e)?;
    ensure(err > 0.0 && (p - 20.0 * (1.0 / err).log10()).abs() < 1e-9, format!("PSNR {p} vs RMSE {err}"))?;
    let same = Metrics::compute(&z, &z).map_err(e)?;
    ensure(same.psnr == f64::INFINITY, format!("identical inputs give PSNR {}", same.psnr))?;
    Ok(format!("MRAE {m:.12}, SAM(kx,x) {worst_sam:.1e} deg, PSNR {p:.3} dB at RMSE {err:.4}, identical -> inf"))
}

const TRAIN_STEPS: usize = 1000;

fn desk_training() -> Outcome {
    let start = Instant::now();
    let e = |e: r2h_core::Error| e.to_string();
    let data = Dataset::synthetic(200, 20, 32, 32, 0).map_err(e)?;
    let cfg = TrainConfig {
        total_steps: TRAIN_STEPS,
        val_every: 250,
        ..TrainConfig::default()
    };
    ensure(
        cfg.steps == 5 && cfg.delta == 0.01 && cfg.lambda == 1.0 && cfg.lr0 == 4e-4 && cfg.batch_size == 8,
        "training defaults drifted",
    )?;
    let full = fit(DenoiserModel::new(DenoiserConfig::default(), 0).map_err(e)?, &data, &cfg, |_| {}).map_err(e)?;
    let base = fit(BaseEstimator::new(31, 0), &data, &cfg, |_| {}).map_err(e)?;
    let elapsed = start.elapsed();

    let (first, last) = full.loss_window(20);
    let (full_psnr, base_psnr) = (full.best_val.metrics.psnr, base.best_val.metrics.psnr);
    let detail = format!(
        "{TRAIN_STEPS} steps, loss {first:.4} -> {last:.4} (20-step means), best val PSNR {full_psnr:.2} dB vs base-only {base_psnr:.2} dB, {elapsed:.0?}"
    );
    ensure(last < 0.5 * first, format!("loss did not halve: {detail}"))?;
    ensure(full_psnr >= base_psnr + 1.0, format!("PSNR margin under 1 dB: {detail}"))?;
    ensure(elapsed < Duration::from_secs(20 * 60), format!("too slow: {detail}"))?;
    Ok(detail)
}

fn budget() -> Outcome {
    let model = DenoiserModel::new(DenoiserConfig::default(), 0).map_err(|e| e.to_string())?;
    let n = model.count_params();
    let (one, five) = (model.count_flops(256, 256, 1), model.count_flops(256, 256, 5));
    let detail = format!(
        "params {n} ({:.3}M, reference 0.58M), 5-step FLOPs at 256x256 {:.2}G = 5 x {:.2}G",
        n as f64 / 1e6,
        five as f64 / 1e9,
        one as f64 / 1e9
    );
    ensure((300_000..=900_000).contains(&n), format!("out of range: {detail}"))?;
    ensure(five == 5 * one, format!("FLOPs not linear in steps: {detail}"))?;
    Ok(detail)
}

fn ablation_hooks() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let variants: [(&str, &[&str]); 4] = [
        ("lambda0", &["lambda=0"]),
        ("lambda1", &["lambda=1"]),
        ("no_gsrm", &["use_gsrm=false"]),
        ("no_hata", &["use_hata=false"]),
    ];
    let mut psnrs = Vec::new();
    for (name, extra) in variants {
        let out = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_r2h"));
        cmd.args(["train", "--out"]).arg(&out);
        let base = ["n_train=6", "n_val=2", "height=8", "width=8", "patch_size=8", "batch_size=2", "total_steps=4", "val_every=2"];
        for kv in base.iter().chain(extra) {
            cmd.args(["--set", kv]);
        }
        let run = cmd.output().map_err(|e| e.to_string())?;
        let stdout = String::from_utf8_lossy(&run.stdout);
        ensure(
            run.status.success(),
            format!("{name}: exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr)),
        )?;
        ensure(stdout.contains("val step="), format!("{name}: no metrics logged"))?;
        let val = std::fs::read_to_string(out.join("val.csv")).map_err(|e| e.to_string())?;
        let last = val.lines().last().unwrap_or_default().to_string();
        let psnr: f64 = last.split(',').nth(3).and_then(|v| v.parse().ok()).ok_or(format!("{name}: bad val.csv"))?;
        ensure(val.lines().count() == 3 && psnr.is_finite(), format!("{name}: val.csv {val:?}"))?;
        ensure(out.join("checkpoint/manifest.txt").exists(), format!("{name}: no checkpoint"))?;
        psnrs.push(format!("{name} {psnr:.2} dB"));
    }
    Ok(format!("train completed and logged metrics: {}", psnrs.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("schedule identities", schedule_identities),
        ("oracle-denoiser exactness", oracle_exactness),
        ("HATA brute-force equivalence", hata_equivalence),
        ("init identity", init_identity),
        ("loss correctness", loss_correctness),
        ("metric sanity", metric_sanity),
        ("desk-scale training", desk_training),
        ("parameter and FLOP budget", budget),
        ("ablation hooks", ablation_hooks),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {reason}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
