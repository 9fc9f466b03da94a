//! Multichannel EEG classification from inter-channel energy differences.
//!
//! The pipeline slices recordings into overlapping trials, measures the
//! spectral energy of every channel in dB, builds the `C x C` matrix of
//! pairwise energy differences (optionally its centered temporal
//! derivative) and classifies the matrix, read row by row as a sequence,
//! with a bidirectional LSTM trained from scratch.

pub mod archive;
pub mod bilstm;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod ingest;
pub mod pipeline;
pub mod segmentation;
pub mod synthgen;

mod binio;

pub use error::Error;
