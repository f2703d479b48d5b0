//! Flat `key = value` run configuration covering model, training and data knobs.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected. The
//! [`RunConfig::echo`] output parses back to the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 20,
            height: 32,
            width: 32,
            seed: 0,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "total_steps" => t.total_steps = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "T" => t.steps = parse(key, value)?,
            "delta" => t.delta = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "val_every" => t.val_every = parse(key, value)?,
            "patch_size" => t.patch_size = parse(key, value)?,
            "weight_decay" => t.adamw.weight_decay = parse(key, value)?,
            "beta1" => t.adamw.beta1 = parse(key, value)?,
            "beta2" => t.adamw.beta2 = parse(key, value)?,
            "adam_eps" => t.adamw.eps = parse(key, value)?,
            "n_train" => d.n_train = parse(key, value)?,
            "n_val" => d.n_val = parse(key, value)?,
            "height" => d.height = parse(key, value)?,
            "width" => d.width = parse(key, value)?,
            "data_seed" => d.seed = parse(key, value)?,
            "data_dir" => d.dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.n_train == 0 || d.n_val == 0 || d.height == 0 || d.width == 0 {
            return Err(Error::Config("n_train, n_val, height and width must be positive".into()));
        }
        let m = self.model.spatial_multiple();
        if self.train.patch_size % m != 0 || d.height % m != 0 || d.width % m != 0 {
            return Err(Error::Config(format!(
                "patch_size, height and width must be multiples of {m}"
            )));
        }
        if self.train.patch_size > d.height.min(d.width) {
            return Err(Error::Config("patch_size exceeds the image size".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        fn kv(k: &str, v: impl Display) -> (String, String) {
            (k.to_string(), v.to_string())
        }
        let t = &self.train;
        let d = &self.data;
        let mut out = self.model.to_kv();
        out.extend([
            kv("batch_size", t.batch_size),
            kv("lr0", format!("{:e}", t.lr0)),
            kv("total_steps", t.total_steps),
            kv("lambda", t.lambda),
            kv("T", t.steps),
            kv("delta", t.delta),
            kv("seed", t.seed),
            kv("val_every", t.val_every),
            kv("patch_size", t.patch_size),
            kv("weight_decay", t.adamw.weight_decay),
            kv("beta1", t.adamw.beta1),
            kv("beta2", t.adamw.beta2),
            kv("adam_eps", format!("{:e}", t.adamw.eps)),
            kv("n_train", d.n_train),
            kv("n_val", d.n_val),
            kv("height", d.height),
            kv("width", d.width),
            kv("data_seed", d.seed),
            kv("data_dir", d.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
        ]);
        out
    }

    /// The effective configuration as parseable text.
    pub fn echo(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("lr0", "1.5e-3").unwrap();
        cfg.set("use_gsrm", "false").unwrap();
        cfg.set("delta", "0.001").unwrap();
        cfg.set("data_dir", "/tmp/x y").unwrap();
        let back = RunConfig::parse_str(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::parse_str("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("lr0 = fast"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("delta = 1.5"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("patch_size = 18"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("just text"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse_str("# run\n\nlambda = 0   # ablation\nT=20\n").unwrap();
        assert_eq!(cfg.train.lambda, 0.0);
        assert_eq!(cfg.train.steps, 20);
    }
}
