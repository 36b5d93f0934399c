//! End-to-end pipeline: procedural subject synthesis, dataset rendering,
//! tri-plane fitting, the two diffusion training stages plus the latent
//! prior, and the sampling / inversion / evaluation stages behind the CLI.
//! Every stage reads one flat config, writes artifacts under `out_dir`, and
//! leaves a JSON report with content hashes.

pub mod config;
pub mod metrics;
pub mod stages;
pub mod subjects;

pub use config::PipelineConfig;
pub use metrics::{psnr, ssim};
pub use stages::{
    interpolate_latents, invert, make_schedule, resolution_sweep, run_stage, NormStats, Paths,
    SamplerKit,
};
pub use subjects::{synth_dataset, Subject, SubjectField, SubjectParams, SynthConfig};

use std::path::PathBuf;
use thiserror::Error;

/// Stage failures, partitioned by the process exit code they map to:
/// config problems exit 2, missing upstream artifacts exit 3, and
/// numerical or I/O failures mid-run exit 4.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Numerical(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingArtifact(_) => 3,
            PipelineError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            PipelineError::Io(_) | PipelineError::Numerical(_) => 4,
        }
    }
}

macro_rules! numerical_from {
    ($($ty:ty),* $(,)?) => {
        $(impl From<$ty> for PipelineError {
            fn from(e: $ty) -> Self {
                PipelineError::Numerical(e.to_string())
            }
        })*
    };
}

numerical_from!(
    crate::numerics::NumericsError,
    crate::triplane::TriPlaneError,
    crate::radiance::RadianceError,
    crate::fitting::FitError,
    crate::denoiser::DenoiserError,
    crate::denoiser::checkpoint::CheckpointError,
    crate::diffusion::DiffusionError,
    serde_json::Error,
);
