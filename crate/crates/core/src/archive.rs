//! Feature archive: a featurized dataset on disk.
//!
//! ```text
//! "EEGF"         4 bytes magic
//! version        u16 (currently 1)
//! feature kind   u8  (0 = plain, 1 = derivative)
//! channels C     u32
//! sequences      u64
//! classes        u16, then that many u16-length-prefixed UTF-8 names
//! per sequence   u32 label id, then C x C f64 row-major
//! ```
//!
//! All integers and floats little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

use crate::binio::{Reader, Writer};
use crate::features::{FeatureKind, FeatureSequence};
use crate::ingest::Dataset;

pub const MAGIC: &[u8; 4] = b"EEGF";
pub const FORMAT_VERSION: u16 = 1;

/// Errors shared by the feature archive and model checkpoint formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic, expected {0:?}")]
    BadMagic(&'static str),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("file is truncated")]
    Truncated,
    #[error("{0} unexpected bytes at end of file")]
    TrailingBytes(usize),
    #[error("invalid content: {0}")]
    Invalid(String),
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let io = |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    };
    // Write next to the target and rename so readers never see half a file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub(crate) fn read_names(rd: &mut Reader<'_>) -> Result<Vec<String>, FormatError> {
    let n = rd.u16().ok_or(FormatError::Truncated)?;
    (0..n)
        .map(|_| {
            let b = rd.bytes16().ok_or(FormatError::Truncated)?;
            String::from_utf8(b.to_vec())
                .map_err(|_| FormatError::Invalid("class name is not UTF-8".into()))
        })
        .collect()
}

pub(crate) fn write_names(w: &mut Writer, names: &[String]) {
    w.u16(names.len() as u16);
    for n in names {
        w.str16(n);
    }
}

/// A dataset together with the kind of feature it holds.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    pub kind: FeatureKind,
    pub dataset: Dataset,
}

impl FeatureArchive {
    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        let c = match self.dataset.sequence_shape() {
            Some((steps, features)) if steps == features => features,
            Some(shape) => {
                return Err(FormatError::Invalid(format!(
                    "sequences must be square, got {shape:?}"
                )))
            }
            None => 0,
        };
        if self.dataset.class_vocab.len() > u16::MAX as usize {
            return Err(FormatError::Invalid("too many classes".into()));
        }
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u16(FORMAT_VERSION);
        w.u8(match self.kind {
            FeatureKind::Plain => 0,
            FeatureKind::Derivative => 1,
        });
        w.u32(c as u32);
        w.u64(self.dataset.len() as u64);
        write_names(&mut w, &self.dataset.class_vocab);
        w.buf.reserve(self.dataset.len() * (4 + 8 * c * c));
        for (seq, label) in &self.dataset.items {
            w.u32(*label as u32);
            for v in seq.rows.iter() {
                w.f64(*v);
            }
        }
        Ok(w.buf)
    }

    pub fn decode(data: &[u8]) -> Result<Self, FormatError> {
        if data.len() < 4 || &data[..4] != MAGIC {
            return Err(FormatError::BadMagic("EEGF"));
        }
        let mut rd = Reader::new(&data[4..]);
        let version = rd.u16().ok_or(FormatError::Truncated)?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let kind = match rd.u8().ok_or(FormatError::Truncated)? {
            0 => FeatureKind::Plain,
            1 => FeatureKind::Derivative,
            other => return Err(FormatError::Invalid(format!("feature kind {other}"))),
        };
        let c = rd.u32().ok_or(FormatError::Truncated)? as usize;
        let count = rd.u64().ok_or(FormatError::Truncated)?;
        let class_vocab = read_names(&mut rd)?;
        let per_item = 4 + 8 * c * c;
        if (rd.remaining() as u64) < count.saturating_mul(per_item as u64) {
            return Err(FormatError::Truncated);
        }
        let mut items = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let label = rd.u32().ok_or(FormatError::Truncated)? as usize;
            let values: Vec<f64> = (0..c * c)
                .map(|_| rd.f64().ok_or(FormatError::Truncated))
                .collect::<Result<_, _>>()?;
            let rows = Array2::from_shape_vec((c, c), values)
                .map_err(|e| FormatError::Invalid(e.to_string()))?;
            items.push((FeatureSequence::new(rows), label));
        }
        if rd.remaining() != 0 {
            return Err(FormatError::TrailingBytes(rd.remaining()));
        }
        let dataset =
            Dataset::new(items, class_vocab).map_err(|e| FormatError::Invalid(e.to_string()))?;
        Ok(Self { kind, dataset })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::decode(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn archive(c: usize, labels: &[usize], seed: f64) -> FeatureArchive {
        let items = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let rows = Array2::from_shape_fn((c, c), |(a, b)| {
                    seed * (i + 1) as f64 * (a as f64 - b as f64)
                });
                (FeatureSequence::new(rows), l)
            })
            .collect();
        FeatureArchive {
            kind: FeatureKind::Derivative,
            dataset: Dataset::new(items, vec!["M".into(), "V".into()]).unwrap(),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = archive(3, &[1, 0], 0.5).encode().unwrap();
        assert_eq!(&bytes[..4], b"EEGF");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 1);
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[11..19].try_into().unwrap()), 2);
        // 2 names of 1 byte each: 2 + 2 * 3, then 2 * (4 + 72)
        assert_eq!(bytes.len(), 19 + 8 + 2 * (4 + 72));
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = archive(2, &[0, 1, 1], 1.0).encode().unwrap();
        assert!(matches!(
            FeatureArchive::decode(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated)
        ));
        assert!(matches!(
            FeatureArchive::decode(b"EEGR...."),
            Err(FormatError::BadMagic(_))
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            FeatureArchive::decode(&longer),
            Err(FormatError::TrailingBytes(1))
        ));
    }

    proptest! {
        #[test]
        fn round_trip(c in 2usize..6, labels in proptest::collection::vec(0usize..2, 0..8), seed in -1e6f64..1e6) {
            let a = archive(c, &labels, seed);
            let back = FeatureArchive::decode(&a.encode().unwrap()).unwrap();
            prop_assert_eq!(back.kind, a.kind);
            prop_assert_eq!(back.dataset.class_vocab, a.dataset.class_vocab);
            prop_assert_eq!(back.dataset.items, a.dataset.items);
        }
    }
}
