//! Synthetic RGB/HSI pairs, the camera response, and training augmentation.
//!
//! Each synthetic cube mixes 2 to 5 smooth spectra (one Gaussian bump over
//! the band index each). Per-pixel abundances are a softmax over smooth
//! random fields built from low-frequency sinusoids, so materials blend
//! softly across the image. The cube is then rescaled to `[0.05, 0.95]`
//! and projected to RGB through the camera response.

use std::fs;
use std::path::{Path, PathBuf};

use r2h_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor, Dtype};

pub const BANDS: usize = 31;
pub const FIRST_WAVELENGTH_NM: f64 = 400.0;
pub const BAND_STEP_NM: f64 = 10.0;

const RANGE_LO: f64 = 0.05;
const RANGE_HI: f64 = 0.95;
const FIELD_TERMS: usize = 3;
const ABUNDANCE_SHARPNESS: f64 = 6.0;

/// 3 × bands response matrix with rows R, G, B, each summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Crf {
    matrix: Tensor,
}

impl Crf {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let &[3, bands] = matrix.shape() else {
            return Err(Error::invalid(format!("CRF must be [3, bands], got {:?}", matrix.shape())));
        };
        for r in 0..3 {
            let row = &matrix.data()[r * bands..(r + 1) * bands];
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::invalid(format!("CRF row {r} has negative or non-finite weights")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("CRF row {r} sums to {s}, expected 1")));
            }
        }
        Ok(Self { matrix })
    }

    /// Gaussian rows centred on 610, 540 and 470 nm with a 3-band spread.
    pub fn synthetic() -> Self {
        let centers = [610.0, 540.0, 470.0].map(|nm| (nm - FIRST_WAVELENGTH_NM) / BAND_STEP_NM);
        let sigma = 3.0;
        let mut data = Vec::with_capacity(3 * BANDS);
        for c in centers {
            let row: Vec<f64> = (0..BANDS)
                .map(|b| (-((b as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
                .collect();
            let s: f64 = row.iter().sum();
            data.extend(row.into_iter().map(|v| v / s));
        }
        Self {
            matrix: Tensor::new(&[3, BANDS], data).expect("3 x 31"),
        }
    }

    pub fn bands(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn weight(&self, channel: usize, band: usize) -> f64 {
        self.matrix.data()[channel * self.bands() + band]
    }
}

/// Per-pixel `rgb = CRF · hsi`.
pub fn project_rgb(hsi: &Tensor, crf: &Crf) -> Result<Tensor> {
    let &[bands, h, w] = hsi.shape() else {
        return Err(Error::invalid(format!("HSI must be [B, H, W], got {:?}", hsi.shape())));
    };
    if bands != crf.bands() {
        return Err(Error::invalid(format!("HSI has {bands} bands, CRF expects {}", crf.bands())));
    }
    let hw = h * w;
    let mut out = vec![0.0; 3 * hw];
    for (c, plane) in out.chunks_mut(hw).enumerate() {
        for b in 0..bands {
            let k = crf.weight(c, b);
            let src = &hsi.data()[b * hw..(b + 1) * hw];
            plane.iter_mut().zip(src).for_each(|(o, v)| *o += k * v);
        }
    }
    Ok(Tensor::new(&[3, h, w], out)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSample {
    pub id: String,
    pub hsi: Tensor,
    pub rgb: Tensor,
}

impl SpectralSample {
    pub fn hw(&self) -> (usize, usize) {
        (self.hsi.shape()[1], self.hsi.shape()[2])
    }
}

struct Wave {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

fn synthetic_cube(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let k = rng.gen_range(2..=5);
    let spectra: Vec<[f64; BANDS]> = (0..k)
        .map(|_| {
            let center = rng.gen_range(0.0..(BANDS - 1) as f64);
            let width: f64 = rng.gen_range(2.0..8.0);
            let amp = rng.gen_range(0.3..1.0);
            std::array::from_fn(|b| amp * (-((b as f64 - center).powi(2)) / (2.0 * width * width)).exp())
        })
        .collect();
    let fields: Vec<Vec<Wave>> = (0..k)
        .map(|_| {
            (0..FIELD_TERMS)
                .map(|_| Wave {
                    amp: rng.gen_range(0.2..1.0),
                    fx: rng.gen_range(-2.0..2.0),
                    fy: rng.gen_range(-2.0..2.0),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                })
                .collect()
        })
        .collect();

    let hw = h * w;
    let mut cube = vec![0.0; BANDS * hw];
    let mut logits = vec![0.0; k];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            for (l, field) in logits.iter_mut().zip(&fields) {
                let value: f64 = field
                    .iter()
                    .map(|wv| wv.amp * (std::f64::consts::TAU * (wv.fx * u + wv.fy * v) + wv.phase).sin())
                    .sum();
                *l = ABUNDANCE_SHARPNESS * value;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let p = y * w + x;
            for (l, s) in logits.iter().zip(&spectra) {
                let a = (l - m).exp() / z;
                for b in 0..BANDS {
                    cube[b * hw + p] += a * s[b];
                }
            }
        }
    }

    let lo = cube.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cube.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut cube {
        *v = if span > 0.0 {
            RANGE_LO + (RANGE_HI - RANGE_LO) * (*v - lo) / span
        } else {
            0.5 * (RANGE_LO + RANGE_HI)
        };
    }
    Tensor::new(&[BANDS, h, w], cube).expect("cube shape")
}

/// Samples `first..first + n` of the seeded synthetic stream; sample `i`
/// depends only on `(seed, i)`.
pub fn gen_synthetic_range(first: usize, n: usize, h: usize, w: usize, seed: u64, crf: &Crf) -> Result<Vec<SpectralSample>> {
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("need at least one sample of nonzero size"));
    }
    if crf.bands() != BANDS {
        return Err(Error::invalid(format!("CRF must cover {BANDS} bands")));
    }
    (first..first + n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let hsi = synthetic_cube(h, w, &mut rng);
            let rgb = project_rgb(&hsi, crf)?;
            Ok(SpectralSample {
                id: format!("s{i:05}"),
                hsi,
                rgb,
            })
        })
        .collect()
}

pub fn gen_synthetic(n: usize, h: usize, w: usize, seed: u64, crf: &Crf) -> Result<Vec<SpectralSample>> {
    gen_synthetic_range(0, n, h, w, seed, crf)
}

/// A crop followed by a dihedral transform of the square crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialTransform {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    /// Number of counter-clockwise quarter turns.
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl SpatialTransform {
    pub fn random(h: usize, w: usize, patch: usize, rng: &mut impl Rng) -> Result<Self> {
        if patch == 0 || patch > h || patch > w {
            return Err(Error::invalid(format!("patch size {patch} does not fit a {h}x{w} image")));
        }
        Ok(Self {
            top: rng.gen_range(0..=h - patch),
            left: rng.gen_range(0..=w - patch),
            size: patch,
            quarter_turns: rng.gen_range(0..4),
            flip_h: rng.gen(),
            flip_v: rng.gen(),
        })
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let mut out = crop(t, self.top, self.left, self.size, self.size)?;
        for _ in 0..self.quarter_turns {
            out = rot90(&out)?;
        }
        if self.flip_h {
            out = flip_horizontal(&out)?;
        }
        if self.flip_v {
            out = flip_vertical(&out)?;
        }
        Ok(out)
    }
}

fn dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::invalid(format!("expected [C, H, W], got {s:?}"))),
    }
}

fn remap(t: &Tensor, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = dims(t)?;
    let d = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let (si, sj) = src(i, j);
                out.push(d[(ch * h + si) * w + sj]);
            }
        }
    }
    Ok(Tensor::new(&[c, oh, ow], out)?)
}

pub fn crop(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let (_, th, tw) = dims(t)?;
    if top + h > th || left + w > tw {
        return Err(Error::invalid(format!("crop {h}x{w}+{top}+{left} exceeds {th}x{tw}")));
    }
    remap(t, h, w, |i, j| (top + i, left + j))
}

/// Counter-clockwise quarter turn of a square `[C, N, N]` map.
pub fn rot90(t: &Tensor) -> Result<Tensor> {
    let (_, h, w) = dims(t)?;
    if h != w {
        return Err(Error::invalid(format!("rotation needs a square map, got {h}x{w}")));
    }
    remap(t, h, w, |i, j| (j, w - 1 - i))
}

pub fn flip_horizontal(t: &Tensor) -> Result<Tensor> {
    let (_, h, w) = dims(t)?;
    remap(t, h, w, |i, j| (i, w - 1 - j))
}

pub fn flip_vertical(t: &Tensor) -> Result<Tensor> {
    let (_, h, w) = dims(t)?;
    remap(t, h, w, |i, j| (h - 1 - i, j))
}

/// Random crop to `patch` plus a random rotation/flip, applied identically
/// to both modalities. The input sample is left untouched.
pub fn augment(sample: &SpectralSample, patch: usize, rng: &mut impl Rng) -> Result<SpectralSample> {
    let (h, w) = sample.hw();
    let tf = SpatialTransform::random(h, w, patch, rng)?;
    Ok(SpectralSample {
        id: sample.id.clone(),
        hsi: tf.apply(&sample.hsi)?,
        rgb: tf.apply(&sample.rgb)?,
    })
}

pub fn augment_seeded(sample: &SpectralSample, patch: usize, seed: u64) -> Result<SpectralSample> {
    augment(sample, patch, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub const TRAIN_DIR: &str = "train";
pub const VAL_DIR: &str = "val";
pub const CRF_FILE: &str = "crf.r2ht";

fn sample_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.hsi.r2ht")), dir.join(format!("{id}.rgb.r2ht")))
}

pub fn write_split(dir: &Path, samples: &[SpectralSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        let (hp, rp) = sample_paths(dir, &s.id);
        write_tensor(hp, &s.hsi, Dtype::F32)?;
        write_tensor(rp, &s.rgb, Dtype::F32)?;
    }
    Ok(())
}

/// Loads every `<id>.hsi.r2ht` / `<id>.rgb.r2ht` pair in `dir`, sorted by id.
pub fn read_split(dir: &Path) -> Result<Vec<SpectralSample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".hsi.r2ht")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let (hp, rp) = sample_paths(dir, &id);
            let hsi = read_tensor(&hp)?;
            let rgb = read_tensor(&rp)?;
            if rgb.rank() != 3 || hsi.rank() != 3 || rgb.shape()[1..] != hsi.shape()[1..] || rgb.shape()[0] != 3 {
                return Err(Error::invalid(format!(
                    "{id}: HSI {:?} and RGB {:?} do not pair up",
                    hsi.shape(),
                    rgb.shape()
                )));
            }
            Ok(SpectralSample { id, hsi, rgb })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SpectralSample>,
    pub val: Vec<SpectralSample>,
    pub crf: Crf,
}

impl Dataset {
    /// Train and val draw disjoint indices from one seeded stream.
    pub fn synthetic(n_train: usize, n_val: usize, h: usize, w: usize, seed: u64) -> Result<Self> {
        let crf = Crf::synthetic();
        let train = gen_synthetic_range(0, n_train, h, w, seed, &crf)?;
        let val = gen_synthetic_range(n_train, n_val, h, w, seed, &crf)?;
        Ok(Self { train, val, crf })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_split(&root.join(TRAIN_DIR), &self.train)?;
        write_split(&root.join(VAL_DIR), &self.val)?;
        write_tensor(root.join(CRF_FILE), self.crf.matrix(), Dtype::F64)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let crf = Crf::new(read_tensor(root.join(CRF_FILE))?)?;
        Ok(Self {
            train: read_split(&root.join(TRAIN_DIR))?,
            val: read_split(&root.join(VAL_DIR))?,
            crf,
        })
    }
}
