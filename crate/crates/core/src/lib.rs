//! R2H-Diff: conditional diffusion for RGB-to-hyperspectral reconstruction.
//!
//! A short deterministic DDIM chain refines Gaussian noise into a 31-band
//! cube, guided at every step by the RGB image. The denoiser predicts the
//! clean cube directly as a base estimate plus a learned residual.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod gsrm;
pub mod hata;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use config::RunConfig;
pub use data::{Crf, Dataset, SpectralSample};
pub use denoiser::{BaseEstimator, Denoiser, DenoiserConfig, DenoiserModel};
pub use error::{Error, FormatError, Result};
pub use loss::LossConfig;
pub use metrics::Metrics;
pub use sampler::{reconstruct, reconstruct_from, Reconstruction, SamplerConfig, X0Predictor};
pub use schedule::NoiseSchedule;
pub use trainer::{fit, FitResult, TrainConfig};
