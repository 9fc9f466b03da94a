//! Model checkpoint file.
//!
//! ```text
//! "EEGM"      4 bytes magic
//! version     u16 (currently 1)
//! F, H        u32 feature size, u32 hidden size
//! classes     u16 K, then K u16-length-prefixed UTF-8 names
//! parameters  f64 blocks: fwd.W (4H x F), fwd.U (4H x H), fwd.b (4H),
//!             bwd.W, bwd.U, bwd.b, fc_w (K x 2H), fc_b (K)
//! ```
//!
//! Matrices are row-major, gate blocks ordered input, forget, cell
//! candidate, output. Everything little-endian.

use std::path::Path;

use crate::archive::{read_file, read_names, write_file, write_names, FormatError};
use crate::bilstm::{BiLstmClassifier, ParamTensors};
use crate::binio::{Reader, Writer};

pub const MAGIC: &[u8; 4] = b"EEGM";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode(model: &BiLstmClassifier) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u32(model.features() as u32);
    w.u32(model.hidden() as u32);
    write_names(&mut w, &model.class_vocab);
    for t in model.tensors() {
        for v in t {
            w.f64(*v);
        }
    }
    w.buf
}

pub fn decode(data: &[u8]) -> Result<BiLstmClassifier, FormatError> {
    if data.len() < 4 || &data[..4] != MAGIC {
        return Err(FormatError::BadMagic("EEGM"));
    }
    let mut rd = Reader::new(&data[4..]);
    let version = rd.u16().ok_or(FormatError::Truncated)?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let features = rd.u32().ok_or(FormatError::Truncated)? as usize;
    let hidden = rd.u32().ok_or(FormatError::Truncated)? as usize;
    let vocab = read_names(&mut rd)?;
    let mut model = BiLstmClassifier::zeros(features, hidden, vocab)
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    if (rd.remaining() as u64) < model.param_count() as u64 * 8 {
        return Err(FormatError::Truncated);
    }
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v = rd.f64().ok_or(FormatError::Truncated)?;
        }
    }
    if rd.remaining() != 0 {
        return Err(FormatError::TrailingBytes(rd.remaining()));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &BiLstmClassifier) -> Result<(), FormatError> {
    write_file(path, &encode(model))
}

pub fn load(path: &Path) -> Result<BiLstmClassifier, FormatError> {
    decode(&read_file(path)?)
}
