use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use r2h_core::data::{Dataset, BANDS};
use r2h_core::io::{read_tensor, write_tensor, Dtype};
use r2h_core::trainer::FitEvent;
use r2h_core::{checkpoint, fit, gradcheck, reconstruct, DenoiserModel, Error, Metrics, RunConfig, SamplerConfig};
use r2h_tensor::Tensor;

const REFERENCE_PARAMS_M: f64 = 0.58;
const REFERENCE_FLOPS_G: f64 = 12.25;
const CONFIG_ECHO: &str = "config.txt";
const HSI_SUFFIX: &str = ".hsi.r2ht";
const RGB_SUFFIX: &str = ".rgb.r2ht";

#[derive(Parser)]
#[command(name = "r2h", version, about = "RGB to hyperspectral reconstruction by conditional diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing logs and the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; synthesized from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct cubes from RGB containers with a trained checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// RGB containers or directories holding `*.rgb.r2ht` files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score reconstructions against ground truth, matched by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the noise schedule as CSV.
    Schedule {
        #[arg(long = "T", default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-band absolute difference maps as PNG and raw containers.
    Diffmap {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma separated band indices.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 15, 30])]
        bands: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter count and FLOPs of the configured model.
    ReportComplexity {
        #[command(flatten)]
        common: Common,
        #[arg(long = "H", default_value_t = 256)]
        height: usize,
        #[arg(long = "W", default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Core(Error::Config(_) | Error::InvalidArgument(_)) => 2,
            Self::Core(Error::Io { .. } | Error::Format { .. }) => 3,
            Self::Check(_) => 4,
            Self::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Core(e) => write!(f, "{e}"),
            Self::Check(m) => write!(f, "{m}"),
        }
    }
}

type CliResult = Result<(), Failure>;

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn start_run(out: &Path, cfg: &RunConfig) -> CliResult {
    create_dir(out)?;
    write_text(&out.join(CONFIG_ECHO), &cfg.echo())
}

fn metrics_line(m: &Metrics) -> String {
    format!("mrae={:.6} rmse={:.6} psnr={:.4} sam={:.4}", m.mrae, m.rmse, m.psnr, m.sam)
}

fn gen_data(common: &Common, out: &Path) -> CliResult {
    let cfg = load_config(common)?;
    start_run(out, &cfg)?;
    let d = &cfg.data;
    let data = Dataset::synthetic(d.n_train, d.n_val, d.height, d.width, d.seed)?;
    data.save(out)?;
    println!("wrote {} train and {} val samples to {}", data.train.len(), data.val.len(), out.display());
    Ok(())
}

fn train(common: &Common, data_dir: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_config(common)?;
    start_run(out, &cfg)?;
    let data = match data_dir.or(cfg.data.dir.as_deref()) {
        Some(dir) => Dataset::load(dir)?,
        None => {
            let d = &cfg.data;
            Dataset::synthetic(d.n_train, d.n_val, d.height, d.width, d.seed)?
        }
    };
    let model = DenoiserModel::new(cfg.model.clone(), cfg.train.seed)?;
    println!("params={}", model.count_params());
    let result = fit(model, &data, &cfg.train, |e| {
        if let FitEvent::Validation(v) = e {
            println!("val step={} {}", v.step, metrics_line(&v.metrics));
        }
    })?;
    write_text(&out.join("loss.csv"), &result.loss_csv())?;
    write_text(&out.join("val.csv"), &result.val_csv())?;
    checkpoint::save(&out.join("checkpoint"), &result.best)?;
    println!(
        "done steps={} initial_loss={:.6} final_loss={:.6} best_step={} best {}",
        result.steps.len(),
        result.initial_loss(),
        result.final_loss(),
        result.best_val.step,
        metrics_line(&result.best_val.metrics)
    );
    Ok(())
}

fn list_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sample_id(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    [RGB_SUFFIX, HSI_SUFFIX, ".r2ht"]
        .iter()
        .find_map(|s| name.strip_suffix(s))
        .unwrap_or(name)
        .to_string()
}

fn infer(common: &Common, ckpt: &Path, inputs: &[PathBuf], seed: u64, out: &Path) -> CliResult {
    let cfg = load_config(common)?;
    start_run(out, &cfg)?;
    let model = checkpoint::load(ckpt)?;
    let sampler = SamplerConfig::new(cfg.train.schedule()?);
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            files.extend(list_with_suffix(input, RGB_SUFFIX)?);
        } else {
            files.push(input.clone());
        }
    }
    for (i, file) in files.iter().enumerate() {
        let rgb = read_tensor(file)?;
        let rec = reconstruct(&rgb, &model, &sampler, seed + i as u64)?;
        let dest = out.join(format!("{}{HSI_SUFFIX}", sample_id(file)));
        write_tensor(&dest, &rec.hsi, Dtype::F32)?;
        println!("{} -> {}", file.display(), dest.display());
    }
    Ok(())
}

fn eval(pred: &Path, truth: &Path, out: &Path) -> CliResult {
    create_dir(out)?;
    let preds = list_with_suffix(pred, HSI_SUFFIX)?;
    if preds.is_empty() {
        return Err(Error::InvalidArgument(format!("no *{HSI_SUFFIX} files in {}", pred.display())).into());
    }
    let mut csv = String::from("id,mrae,rmse,psnr,sam\n");
    let mut all = Vec::new();
    for p in &preds {
        let id = sample_id(p);
        let x = read_tensor(truth.join(format!("{id}{HSI_SUFFIX}")))?;
        let m = Metrics::compute(&read_tensor(p)?, &x)?;
        csv.push_str(&format!("{id},{},{},{},{}\n", m.mrae, m.rmse, m.psnr, m.sam));
        all.push(m);
    }
    let mean = Metrics::mean(&all).expect("at least one sample");
    csv.push_str(&format!("mean,{},{},{},{}\n", mean.mrae, mean.rmse, mean.psnr, mean.sam));
    write_text(&out.join("metrics.csv"), &csv)?;
    println!("{} samples, mean {}", all.len(), metrics_line(&mean));
    Ok(())
}

fn schedule(steps: usize, delta: f64, out: Option<&Path>) -> CliResult {
    let s = r2h_core::NoiseSchedule::new(steps, delta)?;
    let csv = s.to_csv();
    if let Some(out) = out {
        create_dir(out)?;
        write_text(&out.join("schedule.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn run_gradcheck(seed: u64, out: Option<&Path>) -> CliResult {
    let report = gradcheck::run_suite(seed)?;
    let mut csv = String::from("name,group,max_rel_error,tolerance,probes,passed\n");
    for o in &report.outcomes {
        println!(
            "{} {:<40} rel={:.3e} tol={:.0e} probes={}",
            if o.passed() { "ok  " } else { "FAIL" },
            o.name,
            o.max_rel_error,
            o.tolerance,
            o.probes
        );
        csv.push_str(&format!(
            "{},{:?},{:e},{:e},{},{}\n",
            o.name,
            o.group,
            o.max_rel_error,
            o.tolerance,
            o.probes,
            o.passed()
        ));
    }
    if let Some(out) = out {
        create_dir(out)?;
        write_text(&out.join("gradcheck.csv"), &csv)?;
    }
    println!("{} checks in {:.2?}", report.outcomes.len(), report.elapsed);
    let failures = report.failures();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("{} gradient checks failed", failures.len())))
    }
}

/// Scales by the image maximum to 8-bit; an all-zero map stays black.
fn to_gray8(values: &[f64]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0, f64::max);
    values
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect()
}

fn diffmap(pred: &Path, truth: &Path, bands: &[usize], out: &Path) -> CliResult {
    let (p, x) = (read_tensor(pred)?, read_tensor(truth)?);
    let &[b, h, w] = x.shape() else {
        return Err(Error::InvalidArgument(format!("expected a [B, H, W] cube, got {:?}", x.shape())).into());
    };
    if p.shape() != x.shape() {
        return Err(Error::InvalidArgument(format!("shape mismatch {:?} vs {:?}", p.shape(), x.shape())).into());
    }
    create_dir(out)?;
    let diff = p.zip_map(&x, |a, c| (a - c).abs()).map_err(Error::from)?;
    for &band in bands {
        if band >= b {
            return Err(Error::InvalidArgument(format!("band {band} out of range for {b} bands")).into());
        }
        let plane = &diff.data()[band * h * w..(band + 1) * h * w];
        let raw = Tensor::new(&[h, w], plane.to_vec()).map_err(Error::from)?;
        write_tensor(out.join(format!("diff_b{band:02}.r2ht")), &raw, Dtype::F64)?;
        let png = out.join(format!("diff_b{band:02}.png"));
        let img = image::GrayImage::from_raw(w as u32, h as u32, to_gray8(plane))
            .expect("buffer matches image size");
        img.save(&png)
            .map_err(|e| io_err(&png, std::io::Error::new(std::io::ErrorKind::Other, e)))?;
        println!("band {band}: max |diff| {:.6} -> {}", plane.iter().copied().fold(0.0, f64::max), png.display());
    }
    Ok(())
}

fn report_complexity(common: &Common, h: usize, w: usize, steps: usize) -> CliResult {
    let cfg = load_config(common)?;
    let m = cfg.model.spatial_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::Config(format!("H and W must be multiples of {m}")).into());
    }
    let model = DenoiserModel::new(cfg.model.clone(), 0)?;
    let params = model.count_params();
    let flops = model.count_flops(h, w, steps);
    println!("bands={BANDS} H={h} W={w} steps={steps}");
    println!("params={params} ({:.3}M, reference {REFERENCE_PARAMS_M}M)", params as f64 / 1e6);
    println!("flops={flops} ({:.3}G, reference {REFERENCE_FLOPS_G}G)", flops as f64 / 1e9);
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::Train { common, data, out } => train(&common, data.as_deref(), &out),
        Command::Infer {
            common,
            checkpoint,
            inputs,
            seed,
            out,
        } => infer(&common, &checkpoint, &inputs, seed, &out),
        Command::Eval { pred, truth, out } => eval(&pred, &truth, &out),
        Command::Schedule { steps, delta, out } => schedule(steps, delta, out.as_deref()),
        Command::Gradcheck { seed, out } => run_gradcheck(seed, out.as_deref()),
        Command::Diffmap { pred, truth, bands, out } => diffmap(&pred, &truth, &bands, &out),
        Command::ReportComplexity {
            common,
            height,
            width,
            steps,
        } => report_complexity(&common, height, width, steps),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
