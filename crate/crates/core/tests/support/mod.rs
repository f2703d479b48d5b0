#![allow(dead_code)]

use std::cell::Cell;

use r2h_core::hata::Hata;
use r2h_core::{Result, X0Predictor};
use r2h_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Returns a fixed cube whatever the state, counting invocations.
pub struct GroundTruth {
    pub x0: Tensor,
    pub calls: Cell<usize>,
}

impl GroundTruth {
    pub fn new(x0: Tensor) -> Self {
        Self { x0, calls: Cell::new(0) }
    }
}

impl X0Predictor for GroundTruth {
    fn bands(&self) -> usize {
        self.x0.shape()[0]
    }

    fn predict_x0(&self, _x_t: &Tensor, _x_rgb: &Tensor, _t: usize) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        Ok(self.x0.clone())
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

type Map = Vec<Vec<Vec<f64>>>;

fn to_map(t: &Tensor) -> Map {
    let [c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    (0..c)
        .map(|k| (0..h).map(|i| (0..w).map(|j| t.data()[(k * h + i) * w + j]).collect()).collect())
        .collect()
}

fn pointwise(x: &Map, w: &Tensor, b: &Tensor) -> Map {
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let (h, wd) = (x[0].len(), x[0][0].len());
    (0..cout)
        .map(|o| {
            (0..h)
                .map(|i| {
                    (0..wd)
                        .map(|j| b.data()[o] + (0..cin).map(|c| w.data()[o * cin + c] * x[c][i][j]).sum::<f64>())
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn depthwise3(x: &Map, w: &Tensor, b: &Tensor) -> Map {
    let (h, wd) = (x[0].len() as isize, x[0][0].len() as isize);
    x.iter()
        .enumerate()
        .map(|(c, plane)| {
            (0..h)
                .map(|i| {
                    (0..wd)
                        .map(|j| {
                            let mut acc = b.data()[c];
                            for di in 0..3isize {
                                for dj in 0..3isize {
                                    let (y, z) = (i + di - 1, j + dj - 1);
                                    if y >= 0 && y < h && z >= 0 && z < wd {
                                        acc += w.data()[c * 9 + (di * 3 + dj) as usize] * plane[y as usize][z as usize];
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Attention map and block output computed with explicit loops.
pub fn hata_oracle(block: &Hata, x: &Tensor) -> (Vec<Vec<f64>>, Tensor) {
    let c = x.shape()[0];
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let qkv = pointwise(&to_map(x), &block.qkv.weight.tensor, &block.qkv.bias.tensor);
    let (q, rest) = qkv.split_at(c);
    let (k, v) = rest.split_at(c);
    let flat = |m: &[Vec<Vec<f64>>]| -> Vec<Vec<f64>> { m.iter().map(|p| p.iter().flatten().copied().collect()).collect() };
    let normalize = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        rows.into_iter()
            .map(|r| {
                let n = r.iter().map(|a| a * a).sum::<f64>().sqrt() + 1e-12;
                r.into_iter().map(|a| a / n).collect()
            })
            .collect()
    };
    let (qn, kn, vf) = (normalize(flat(q)), normalize(flat(k)), flat(v));
    let alpha = block.log_alpha.tensor.data()[0].exp();

    let mut attn = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            let mut dot = 0.0;
            for p in 0..h * w {
                dot += qn[i][p] * kn[j][p];
            }
            attn[i][j] = dot / alpha;
        }
        let m = attn[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = attn[i].iter().map(|a| (a - m).exp()).sum();
        for j in 0..c {
            attn[i][j] = (attn[i][j] - m).exp() / z;
        }
    }
    let mut mixed: Map = vec![vec![vec![0.0; w]; h]; c];
    for i in 0..c {
        for p in 0..h * w {
            let mut acc = 0.0;
            for j in 0..c {
                acc += attn[i][j] * vf[j][p];
            }
            mixed[i][p / w][p % w] = acc;
        }
    }
    let x_attn = pointwise(&mixed, &block.out_proj.weight.tensor, &block.out_proj.bias.tensor);
    let mut lpe = depthwise3(&v.to_vec(), &block.lpe_dw1.weight.tensor, &block.lpe_dw1.bias.tensor);
    lpe.iter_mut().flatten().flatten().for_each(|a| *a = gelu(*a));
    let lpe = depthwise3(&lpe, &block.lpe_dw2.weight.tensor, &block.lpe_dw2.bias.tensor);

    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let l = lpe[ch][i][j];
                out.push(x_attn[ch][i][j] * sigmoid(l) + l);
            }
        }
    }
    (attn, Tensor::new(&[c, h, w], out).unwrap())
}
