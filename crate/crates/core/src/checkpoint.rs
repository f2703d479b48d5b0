//! Model checkpoints: a directory holding `manifest.txt` plus one `R2HT`
//! file (f64) per named parameter.
//!
//! The manifest lists the model configuration as `key = value` lines followed
//! by one `param <name> <d0,d1,...>` line per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use r2h_tensor::Tensor;

use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, FormatError, Result};
use crate::io::{read_tensor, write_tensor, Dtype};
use crate::nn::Module;

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "# r2h checkpoint v1";

fn manifest_error(path: &Path, msg: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        source: FormatError::Manifest(msg),
    }
}

pub fn save(dir: &Path, model: &DenoiserModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{HEADER}\n");
    for (k, v) in model.config().to_kv() {
        manifest.push_str(&format!("{k} = {v}\n"));
    }
    for p in model.params() {
        let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("param {} {}\n", p.name, dims.join(",")));
        write_tensor(dir.join(format!("{}.r2ht", p.name)), &p.tensor, Dtype::F64)?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<DenoiserModel> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(manifest_error(&path, format!("first line must be {HEADER:?}")));
    }
    let mut config = DenoiserConfig::default();
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix("param ") {
            let (name, dims) = rest
                .split_once(' ')
                .ok_or_else(|| manifest_error(&path, format!("bad param line {line:?}")))?;
            let dims = dims
                .split(',')
                .map(|d| d.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| manifest_error(&path, format!("bad shape in {line:?}")))?;
            shapes.insert(name.to_string(), dims);
        } else {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| manifest_error(&path, format!("bad line {line:?}")))?;
            if !config.set(k.trim(), v.trim())? {
                return Err(manifest_error(&path, format!("unknown key {:?}", k.trim())));
            }
        }
    }
    let mut model = DenoiserModel::new(config, 0)?;
    let mut values: BTreeMap<String, Tensor> = BTreeMap::new();
    for p in model.params() {
        let want = shapes
            .get(&p.name)
            .ok_or_else(|| manifest_error(&path, format!("parameter {} not listed", p.name)))?;
        let file = dir.join(format!("{}.r2ht", p.name));
        let t = read_tensor(&file)?;
        if t.shape() != want.as_slice() {
            return Err(manifest_error(
                &file,
                format!("shape {:?} disagrees with manifest {want:?}", t.shape()),
            ));
        }
        values.insert(p.name.clone(), t);
    }
    if values.len() != shapes.len() {
        return Err(manifest_error(&path, "manifest lists parameters the model does not have".into()));
    }
    model.load_params(&values)?;
    Ok(model)
}
