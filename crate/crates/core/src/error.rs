use std::path::PathBuf;

use thiserror::Error;

use crate::archive::FormatError;
use crate::bilstm::ModelError;
use crate::evaluation::EvalError;
use crate::features::FeatureError;
use crate::ingest::IngestError;
use crate::segmentation::SegmentationError;
use crate::synthgen::SynthError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("experiment directory {0} is locked by another run")]
    Locked(PathBuf),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit status for this class of failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Segmentation(_) => 2,
            Error::Io { .. } => 3,
            Error::Ingest(IngestError::Io { .. }) | Error::Format(FormatError::Io { .. }) => 3,
            Error::Ingest(_) | Error::Format(_) => 4,
            Error::Feature(_) | Error::Model(_) | Error::Eval(_) | Error::Synth(_) => 5,
            Error::Locked(_) => 6,
        }
    }
}
