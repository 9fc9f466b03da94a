//! Recording data model, the `.eegr` file format, channel exclusion, and
//! labeled dataset assembly from a manifest.
//!
//! `.eegr` layout (all integers little-endian):
//!
//! ```text
//! "EEGR"            4 bytes magic
//! version           u16 (currently 1)
//! sample_rate_hz    f64
//! channel_count     u16
//! sample_count      u64
//! names             channel_count x (u16 byte length + UTF-8 bytes)
//! payload           channel_count x sample_count f32 microvolts, channel-major
//! ```
//!
//! Subject and label spans are not part of the binary file; they live in the
//! JSON manifest that points at it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{Reader, Writer};
use crate::features::{self, EnergyVector, FeatureKind, FeatureSequence, Orientation};
use crate::segmentation::SegmentPlan;

pub const MAGIC: &[u8; 4] = b"EEGR";
pub const FORMAT_VERSION: u16 = 1;

/// Reference and eye channels of the 64-channel montage; never used as EEG.
pub const NON_EEG_CHANNELS: [&str; 3] = ["FCz", "FT9", "FT10"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a recording file (bad magic)")]
    BadMagic,
    #[error("unsupported recording format version {0}")]
    UnsupportedVersion(u16),
    #[error("recording header is truncated")]
    TruncatedHeader,
    #[error("payload truncated: header declares {expected} bytes, file holds {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("{found} channel names present but header declares {declared}")]
    ChannelMismatch { declared: usize, found: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(u64),
    #[error("channel name is not valid UTF-8")]
    BadChannelName,
    #[error("invalid channel layout: {0}")]
    InvalidLayout(String),
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("invalid label span: {0}")]
    InvalidSpan(String),
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("span {start_s}..{end_s} s of {path} has no {kind} label")]
    MissingLabel {
        path: String,
        start_s: f64,
        end_s: f64,
        kind: LabelKind,
    },
    #[error("unknown {kind} label value {value:?}")]
    BadLabelValue { kind: LabelKind, value: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("feature sequences differ in shape: {0:?} vs {1:?}")]
    InconsistentShape((usize, usize), (usize, usize)),
    #[error("no trials produced")]
    EmptyDataset,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which annotation of a span is used as the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    AudioType,
    Genre,
    Taste,
    Language,
    Known,
}

impl LabelKind {
    pub const ALL: [LabelKind; 5] = [
        LabelKind::AudioType,
        LabelKind::Genre,
        LabelKind::Taste,
        LabelKind::Language,
        LabelKind::Known,
    ];

    /// Closed vocabulary of values for this kind.
    pub fn vocabulary(self) -> &'static [&'static str] {
        match self {
            LabelKind::AudioType => &["V", "M"],
            LabelKind::Genre => &["BA", "CL", "ME", "RE"],
            LabelKind::Taste => &["L", "B", "NL"],
            LabelKind::Language => &["SP", "EN", "IT", "GE", "KO"],
            // know it / sounds familiar / does not know it
            LabelKind::Known => &["K", "F", "NK"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::AudioType => "audio_type",
            LabelKind::Genre => "genre",
            LabelKind::Taste => "taste",
            LabelKind::Language => "language",
            LabelKind::Known => "known",
        }
    }

    pub fn check_value(self, value: &str) -> Result<(), IngestError> {
        if self.vocabulary().contains(&value) {
            Ok(())
        } else {
            Err(IngestError::BadLabelValue {
                kind: self,
                value: value.to_string(),
            })
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelKind {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LabelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| IngestError::Manifest(format!("unknown label kind {s:?}")))
    }
}

/// A labeled interval of a recording, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpan {
    pub start_s: f64,
    pub end_s: f64,
    pub labels: BTreeMap<LabelKind, String>,
}

impl LabelSpan {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        Self {
            start_s,
            end_s,
            labels: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, kind: LabelKind, value: impl Into<String>) -> Self {
        self.labels.insert(kind, value.into());
        self
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn validate(&self, recording_duration_s: f64) -> Result<(), IngestError> {
        if !(self.start_s >= 0.0 && self.start_s < self.end_s && self.end_s <= recording_duration_s)
        {
            return Err(IngestError::InvalidSpan(format!(
                "{}..{} s outside 0..{} s",
                self.start_s, self.end_s, recording_duration_s
            )));
        }
        for (kind, value) in &self.labels {
            kind.check_value(value)?;
        }
        Ok(())
    }
}

/// Ordered, unique channel names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    names: Vec<String>,
}

impl ChannelLayout {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, IngestError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(IngestError::InvalidLayout("no channels".into()));
        }
        if names.len() > u16::MAX as usize {
            return Err(IngestError::InvalidLayout("too many channels".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(IngestError::InvalidLayout("empty channel name".into()));
            }
            if n.len() > u16::MAX as usize {
                return Err(IngestError::InvalidLayout("channel name too long".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(IngestError::InvalidLayout(format!(
                    "duplicate channel {n:?}"
                )));
            }
        }
        Ok(Self { names })
    }

    /// `Ch1`, `Ch2`, ... for layouts without real electrode names.
    pub fn numbered(count: usize) -> Self {
        Self::new((1..=count).map(|i| format!("Ch{i}"))).expect("numbered names are unique")
    }

    /// The 64-electrode montage including reference (FCz) and eye channels
    /// (FT9, FT10).
    pub fn montage_64() -> Self {
        Self::new(MONTAGE_64).expect("montage names are unique")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

const MONTAGE_64: [&str; 64] = [
    "Fp1", "Fz", "F3", "F7", "FT9", "FC5", "FC1", "C3", "T7", "TP9", "CP5", "CP1", "Pz", "P3",
    "P7", "O1", "Oz", "O2", "P4", "P8", "TP10", "CP6", "CP2", "Cz", "C4", "T8", "FT10", "FC6",
    "FC2", "F4", "F8", "Fp2", "AF7", "AF3", "AFz", "F1", "F5", "FT7", "FC3", "C1", "C5", "TP7",
    "CP3", "P1", "P5", "PO7", "PO3", "POz", "PO4", "PO8", "P6", "P2", "CPz", "CP4", "TP8", "C6",
    "C2", "FC4", "FT8", "F6", "AF8", "AF4", "F2", "FCz",
];

/// Continuous multichannel signal, channels x time, in microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub sample_rate_hz: f64,
    pub layout: ChannelLayout,
    pub samples: Array2<f64>,
    pub subject_id: String,
    pub segments: Vec<LabelSpan>,
}

impl Recording {
    pub fn new(
        sample_rate_hz: f64,
        layout: ChannelLayout,
        samples: Array2<f64>,
    ) -> Result<Self, IngestError> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(IngestError::InvalidRecording(format!(
                "sample rate {sample_rate_hz} is not positive"
            )));
        }
        if samples.nrows() != layout.count() {
            return Err(IngestError::ChannelMismatch {
                declared: layout.count(),
                found: samples.nrows(),
            });
        }
        if samples.ncols() == 0 {
            return Err(IngestError::InvalidRecording("no samples".into()));
        }
        Ok(Self {
            sample_rate_hz,
            layout,
            samples,
            subject_id: String::new(),
            segments: Vec::new(),
        })
    }

    pub fn channel_count(&self) -> usize {
        self.layout.count()
    }

    pub fn sample_count(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.sample_count() as f64 / self.sample_rate_hz
    }

    /// Attaches subject and spans, validating every span against the signal.
    pub fn with_annotations(
        mut self,
        subject_id: impl Into<String>,
        segments: Vec<LabelSpan>,
    ) -> Result<Self, IngestError> {
        let duration = self.duration_s();
        for span in &segments {
            span.validate(duration)?;
        }
        self.subject_id = subject_id.into();
        self.segments = segments;
        Ok(self)
    }
}

pub fn encode_recording(r: &Recording) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(FORMAT_VERSION);
    w.f64(r.sample_rate_hz);
    w.u16(r.channel_count() as u16);
    w.u64(r.sample_count() as u64);
    for name in r.layout.names() {
        w.str16(name);
    }
    w.buf.reserve(r.samples.len() * 4);
    for row in r.samples.rows() {
        for &v in row {
            w.f32(v as f32);
        }
    }
    w.buf
}

pub fn decode_recording(data: &[u8]) -> Result<Recording, IngestError> {
    if data.len() < 4 || &data[..4] != MAGIC {
        return Err(IngestError::BadMagic);
    }
    let mut rd = Reader::new(&data[4..]);
    let version = rd.u16().ok_or(IngestError::TruncatedHeader)?;
    if version != FORMAT_VERSION {
        return Err(IngestError::UnsupportedVersion(version));
    }
    let rate = rd.f64().ok_or(IngestError::TruncatedHeader)?;
    let channels = rd.u16().ok_or(IngestError::TruncatedHeader)? as usize;
    let samples = rd.u64().ok_or(IngestError::TruncatedHeader)?;
    let payload_bytes = (channels as u64)
        .checked_mul(samples)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| IngestError::InvalidRecording("declared size overflows".into()))?;

    // Parse names greedily, remembering where the payload would start after
    // each one, so a name count that disagrees with the header is reported
    // as such instead of as a generic size error.
    let names_start = data.len() - rd.remaining();
    let mut names: Vec<&[u8]> = Vec::with_capacity(channels);
    let mut name_ends = vec![names_start];
    loop {
        if names.len() >= channels && (rd.remaining() as u64) <= payload_bytes {
            break;
        }
        let mut probe = Reader::new(&data[data.len() - rd.remaining()..]);
        match probe.bytes16() {
            Some(name) => {
                rd.take(2 + name.len());
                names.push(name);
                name_ends.push(data.len() - rd.remaining());
            }
            None => break,
        }
    }
    let payload_fits = |end: usize| (data.len() - end) as u64 == payload_bytes;
    if names.len() < channels || !payload_fits(name_ends[channels]) {
        if let Some(found) = (0..name_ends.len())
            .filter(|&i| i != channels)
            .find(|&i| payload_fits(name_ends[i]))
        {
            return Err(IngestError::ChannelMismatch {
                declared: channels,
                found,
            });
        }
        if names.len() < channels {
            return Err(IngestError::TruncatedHeader);
        }
        let found = (data.len() - name_ends[channels]) as u64;
        return Err(if found < payload_bytes {
            IngestError::TruncatedPayload {
                expected: payload_bytes,
                found,
            }
        } else {
            IngestError::TrailingBytes(found - payload_bytes)
        });
    }

    let names = names[..channels]
        .iter()
        .map(|b| std::str::from_utf8(b).map(str::to_owned))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| IngestError::BadChannelName)?;
    let layout = ChannelLayout::new(names)?;

    let payload = &data[name_ends[channels]..];
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    let samples = Array2::from_shape_vec((channels, samples as usize), values)
        .map_err(|e| IngestError::InvalidRecording(e.to_string()))?;
    Recording::new(rate, layout, samples)
}

pub fn write_recording(path: &Path, r: &Recording) -> Result<(), IngestError> {
    fs::write(path, encode_recording(r)).map_err(io_err(path))
}

pub fn load_recording(path: &Path) -> Result<Recording, IngestError> {
    let data = fs::read(path).map_err(io_err(path))?;
    decode_recording(&data)
}

/// Drops the named channels, keeping the remaining rows in their original
/// order. Spans and metadata are carried over unchanged.
pub fn exclude_channels<S: AsRef<str>>(
    r: &Recording,
    names: &[S],
) -> Result<Recording, IngestError> {
    let mut drop = BTreeSet::new();
    for n in names {
        let idx = r
            .layout
            .index_of(n.as_ref())
            .ok_or_else(|| IngestError::UnknownChannel(n.as_ref().to_string()))?;
        drop.insert(idx);
    }
    if drop.is_empty() {
        return Ok(r.clone());
    }
    let keep: Vec<usize> = (0..r.channel_count())
        .filter(|i| !drop.contains(i))
        .collect();
    let layout = ChannelLayout::new(keep.iter().map(|&i| r.layout.names()[i].clone()))?;
    Ok(Recording {
        sample_rate_hz: r.sample_rate_hz,
        layout,
        samples: r.samples.select(Axis(0), &keep),
        subject_id: r.subject_id.clone(),
        segments: r.segments.clone(),
    })
}

/// One recording listed in a manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub subject: String,
    pub spans: Vec<LabelSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| IngestError::Manifest(e.to_string()))?;
        for e in &entries {
            for s in &e.spans {
                for (kind, value) in &s.labels {
                    kind.check_value(value)?;
                }
            }
        }
        Ok(Self {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let text = serde_json::to_string_pretty(&self.entries)
            .map_err(|e| IngestError::Manifest(e.to_string()))?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads the entry's recording and attaches subject and spans.
    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<Recording, IngestError> {
        load_recording(&self.resolve(entry))?.with_annotations(&entry.subject, entry.spans.clone())
    }
}

/// Which label to classify and, optionally, which of its values to keep
/// (in class order). Spans whose value is not kept are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTask {
    pub kind: LabelKind,
    pub classes: Option<Vec<String>>,
}

impl LabelTask {
    pub fn all(kind: LabelKind) -> Self {
        Self {
            kind,
            classes: None,
        }
    }
}

/// Segmentation and featurization settings shared by every recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub trial_len_s: f64,
    pub overlap_frac: f64,
    pub feature_kind: FeatureKind,
    pub orientation: Orientation,
    pub exclude: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            trial_len_s: 0.4,
            overlap_frac: 0.5,
            feature_kind: FeatureKind::Plain,
            orientation: Orientation::Rows,
            exclude: NON_EEG_CHANNELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Labeled feature sequences with a fixed class order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<(FeatureSequence, usize)>,
    pub class_vocab: Vec<String>,
}

impl Dataset {
    pub fn new(
        items: Vec<(FeatureSequence, usize)>,
        class_vocab: Vec<String>,
    ) -> Result<Self, IngestError> {
        let shape = items.first().map(|(s, _)| s.shape());
        for (seq, label) in &items {
            if *label >= class_vocab.len() {
                return Err(IngestError::Manifest(format!(
                    "label {label} outside vocabulary of {}",
                    class_vocab.len()
                )));
            }
            if Some(seq.shape()) != shape {
                return Err(IngestError::InconsistentShape(shape.unwrap(), seq.shape()));
            }
        }
        Ok(Self { items, class_vocab })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_vocab.len()];
        for (_, l) in &self.items {
            counts[*l] += 1;
        }
        counts
    }

    /// `(steps, features)` of every sequence, if any.
    pub fn sequence_shape(&self) -> Option<(usize, usize)> {
        self.items.first().map(|(s, _)| s.shape())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            class_vocab: self.class_vocab.clone(),
        }
    }
}

/// Per-trial dB energies kept alongside the dataset for export.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialEnergies {
    pub subject: String,
    pub span: usize,
    pub trial: usize,
    pub label: String,
    pub energies: EnergyVector,
}

#[derive(Debug, Clone)]
pub struct BuiltDataset {
    pub dataset: Dataset,
    pub channel_names: Vec<String>,
    pub energies: Vec<TrialEnergies>,
}

pub fn build_dataset(
    manifest: &Manifest,
    task: &LabelTask,
    cfg: &PipelineConfig,
) -> Result<Dataset, crate::Error> {
    Ok(build_dataset_detailed(manifest, task, cfg)?.dataset)
}

/// Like [`build_dataset`] but also returns the per-trial energy vectors and
/// the channel names they refer to.
pub fn build_dataset_detailed(
    manifest: &Manifest,
    task: &LabelTask,
    cfg: &PipelineConfig,
) -> Result<BuiltDataset, crate::Error> {
    if let Some(classes) = &task.classes {
        for c in classes {
            task.kind.check_value(c)?;
        }
    }
    crate::segmentation::check_params(cfg.trial_len_s, cfg.overlap_frac)?;

    let mut labeled: Vec<(FeatureSequence, String)> = Vec::new();
    let mut energies = Vec::new();
    let mut channel_names: Option<Vec<String>> = None;

    for entry in &manifest.entries {
        for span in &entry.spans {
            if !span.labels.contains_key(&task.kind) {
                return Err(IngestError::MissingLabel {
                    path: entry.path.clone(),
                    start_s: span.start_s,
                    end_s: span.end_s,
                    kind: task.kind,
                }
                .into());
            }
        }
        let recording = exclude_channels(&manifest.load_entry(entry)?, &cfg.exclude)?;
        match &channel_names {
            None => channel_names = Some(recording.layout.names().to_vec()),
            Some(names) if names.as_slice() != recording.layout.names() => {
                return Err(IngestError::InvalidLayout(format!(
                    "{} has a different channel layout than earlier recordings",
                    entry.path
                ))
                .into());
            }
            Some(_) => {}
        }

        for (span_idx, span) in recording.segments.iter().enumerate() {
            let value = &span.labels[&task.kind];
            if let Some(classes) = &task.classes {
                if !classes.contains(value) {
                    continue;
                }
            }
            let plan = SegmentPlan::new(&recording, span, cfg.trial_len_s, cfg.overlap_frac)?;
            let vectors = features::span_energy_vectors(&recording, &plan)?;
            let seqs =
                features::featurize_energy_vectors(&vectors, cfg.feature_kind, cfg.orientation)?;
            for (trial, ev) in vectors.into_iter().enumerate() {
                energies.push(TrialEnergies {
                    subject: entry.subject.clone(),
                    span: span_idx,
                    trial,
                    label: value.clone(),
                    energies: ev,
                });
            }
            labeled.extend(seqs.into_iter().map(|s| (s, value.clone())));
        }
    }

    if labeled.is_empty() {
        return Err(IngestError::EmptyDataset.into());
    }
    let class_vocab = match &task.classes {
        Some(c) => c.clone(),
        None => labeled
            .iter()
            .map(|(_, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let items = labeled
        .into_iter()
        .map(|(s, l)| {
            let idx = class_vocab
                .iter()
                .position(|c| *c == l)
                .expect("label in vocab");
            (s, idx)
        })
        .collect();
    Ok(BuiltDataset {
        dataset: Dataset::new(items, class_vocab)?,
        channel_names: channel_names.unwrap_or_default(),
        energies,
    })
}

/// CSV of per-trial, per-channel dB energies for external plotting.
pub fn energy_csv(built: &BuiltDataset) -> String {
    let mut out = String::from("subject,span,trial,label");
    for n in &built.channel_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for row in &built.energies {
        out.push_str(&format!(
            "{},{},{},{}",
            row.subject, row.span, row.trial, row.label
        ));
        for v in &row.energies.values_db {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn small(channels: usize, samples: usize) -> Recording {
        let data = Array::from_shape_fn((channels, samples), |(c, t)| (c * 1000 + t) as f64 * 0.25);
        Recording::new(250.0, ChannelLayout::numbered(channels), data).unwrap()
    }

    #[test]
    fn montage_has_64_unique_names() {
        let m = ChannelLayout::montage_64();
        assert_eq!(m.count(), 64);
        for n in NON_EEG_CHANNELS {
            assert!(m.index_of(n).is_some(), "{n}");
        }
    }

    #[test]
    fn layout_rejects_duplicates_and_empty() {
        assert!(ChannelLayout::new(["a", "a"]).is_err());
        assert!(ChannelLayout::new(["a", ""]).is_err());
        assert!(ChannelLayout::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn recording_rejects_bad_shape() {
        let layout = ChannelLayout::numbered(3);
        assert!(matches!(
            Recording::new(100.0, layout.clone(), Array2::zeros((2, 10))),
            Err(IngestError::ChannelMismatch { .. })
        ));
        assert!(Recording::new(100.0, layout.clone(), Array2::zeros((3, 0))).is_err());
        assert!(Recording::new(0.0, layout, Array2::zeros((3, 4))).is_err());
    }

    #[test]
    fn round_trip_bytes() {
        let r = small(4, 37);
        assert_eq!(decode_recording(&encode_recording(&r)).unwrap(), r);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_recording(&small(2, 5));
        bytes[0] = b'X';
        assert!(matches!(
            decode_recording(&bytes),
            Err(IngestError::BadMagic)
        ));
        assert!(matches!(
            decode_recording(b"EE"),
            Err(IngestError::BadMagic)
        ));
    }

    #[test]
    fn truncated_payload_by_one_value() {
        let mut bytes = encode_recording(&small(3, 20));
        bytes.truncate(bytes.len() - 4);
        match decode_recording(&bytes) {
            Err(IngestError::TruncatedPayload { expected, found }) => {
                assert_eq!(expected, 3 * 20 * 4);
                assert_eq!(found, 3 * 20 * 4 - 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extra_and_missing_names_are_channel_mismatch() {
        let r = small(3, 8);
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u16(FORMAT_VERSION);
        w.f64(r.sample_rate_hz);
        w.u16(3);
        w.u64(8);
        for n in ["Ch1", "Ch2", "Ch3", "Ch4"] {
            w.str16(n);
        }
        for _ in 0..3 * 8 {
            w.f32(1.0);
        }
        assert!(matches!(
            decode_recording(&w.buf),
            Err(IngestError::ChannelMismatch {
                declared: 3,
                found: 4
            })
        ));

        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u16(FORMAT_VERSION);
        w.f64(r.sample_rate_hz);
        w.u16(3);
        w.u64(8);
        for n in ["Ch1", "Ch2"] {
            w.str16(n);
        }
        for _ in 0..3 * 8 {
            w.f32(1.0);
        }
        assert!(matches!(
            decode_recording(&w.buf),
            Err(IngestError::ChannelMismatch {
                declared: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_recording(&small(2, 6));
        bytes.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(
            decode_recording(&bytes),
            Err(IngestError::TrailingBytes(3))
        ));
    }

    #[test]
    fn exclude_64_to_61() {
        let layout = ChannelLayout::montage_64();
        let r = Recording::new(
            2500.0,
            layout,
            Array::from_shape_fn((64, 10), |(c, _)| c as f64),
        )
        .unwrap();
        let out = exclude_channels(&r, &NON_EEG_CHANNELS).unwrap();
        assert_eq!(out.channel_count(), 61);
        assert_eq!(out.samples.nrows(), 61);
        for n in NON_EEG_CHANNELS {
            assert!(out.layout.index_of(n).is_none());
        }
        // order preserved: remaining rows are increasing original indices
        let originals: Vec<f64> = out.samples.column(0).to_vec();
        assert!(originals.windows(2).all(|w| w[0] < w[1]));
        let kept: Vec<&String> = r
            .layout
            .names()
            .iter()
            .filter(|n| !NON_EEG_CHANNELS.contains(&n.as_str()))
            .collect();
        assert_eq!(out.layout.names().iter().collect::<Vec<_>>(), kept);
    }

    #[test]
    fn exclude_nothing_is_identity() {
        let r = small(3, 5);
        assert_eq!(exclude_channels::<&str>(&r, &[]).unwrap(), r);
    }

    #[test]
    fn exclude_unknown() {
        let r = small(3, 5);
        assert!(matches!(
            exclude_channels(&r, &["XX"]),
            Err(IngestError::UnknownChannel(n)) if n == "XX"
        ));
    }

    #[test]
    fn span_validation() {
        let r = small(2, 500); // 2 s at 250 Hz
        let ok = LabelSpan::new(0.0, 2.0).with_label(LabelKind::AudioType, "M");
        assert!(r.clone().with_annotations("s", vec![ok]).is_ok());
        let late = LabelSpan::new(1.0, 2.5);
        assert!(r.clone().with_annotations("s", vec![late]).is_err());
        let bad = LabelSpan::new(0.0, 1.0).with_label(LabelKind::Genre, "JAZZ");
        assert!(matches!(
            r.with_annotations("s", vec![bad]),
            Err(IngestError::BadLabelValue { .. })
        ));
    }

    #[test]
    fn manifest_keys() {
        let json = r#"[{"path":"a.eegr","subject":"0009","spans":[{"start_s":0,"end_s":30,"labels":{"audio_type":"M","taste":"L"}}]}]"#;
        let entries: Vec<ManifestEntry> = serde_json::from_str(json).unwrap();
        assert_eq!(entries[0].spans[0].labels[&LabelKind::Taste], "L");
        let bad = r#"[{"path":"a.eegr","subject":"x","spans":[],"extra":1}]"#;
        assert!(serde_json::from_str::<Vec<ManifestEntry>>(bad).is_err());
    }
}
