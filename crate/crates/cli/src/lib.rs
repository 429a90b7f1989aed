//! Command-line driver: dataset generation, training, evaluation, single-image inference and
//! the gradient self-check.

mod commands;
mod config;

use std::path::PathBuf;

use shaftpose::datagen::DatagenError;
use shaftpose::detector::DetectorError;
use shaftpose::infer_eval::EvalError;
use shaftpose::nn::{CheckpointError, NnError};
use thiserror::Error;

pub use commands::{
    draw_overlay, grad_check_report, run_eval, run_gen_data, run_infer, run_train, DatasetSummary,
    DetectionsFile, InferOptions, LossRecord,
};
pub use config::{RunConfig, VariantKey};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{what} mismatch\n  checkpoint: {checkpoint}\n  requested:  {requested}")]
    Mismatch {
        what: &'static str,
        checkpoint: String,
        requested: String,
    },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Detector(e.into())
    }
}

fn is_numeric(e: &DetectorError) -> bool {
    matches!(e, DetectorError::NonFiniteLoss { .. } | DetectorError::Nn(NnError::NonFinite(_)))
}

impl CliError {
    /// 1 for invalid input, configuration or I/O; 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Detector(e) | CliError::Eval(EvalError::Detector(e)) if is_numeric(e) => 2,
            CliError::GradCheck(_) => 2,
            _ => 1,
        }
    }
}

/// Stops glibc from handing large freed blocks back to the kernel. Training allocates and frees
/// the same multi-megabyte activation buffers every step, and with the default thresholds each
/// one is a fresh mapping that must be page-faulted in again. No-op on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables and is called before any worker threads
    // exist.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}
