use std::path::Path;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::hsi::HsiError;
use crate::kv::KvError;

#[derive(Debug, Error)]
pub enum SfaError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Hsi(#[from] HsiError),
    #[error(transparent)]
    Config(#[from] KvError),
    #[error("spatial size {height}x{width} is not divisible by the encoder stride {stride}; crop or pad the cube to a multiple of {stride}")]
    Indivisible { height: usize, width: usize, stride: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("channel mismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },
    #[error("band mismatch: model expects {expected} bands, cube has {found} (run band matching first)")]
    BandMismatch { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("json: {0}")]
    Json(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SfaError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SfaError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = SfaError> = std::result::Result<T, E>;
