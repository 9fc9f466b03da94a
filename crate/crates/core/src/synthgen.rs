//! Labeled synthetic recordings with class-specific inter-channel energy
//! profiles.
//!
//! Within a span every channel carries the same band-limited carrier (a sum
//! of sinusoids with random frequencies inside the class band and random
//! phases) scaled by the class's per-channel gain, plus independent white
//! Gaussian noise at the class SNR. With noise off, the energy ratio of two
//! channels is exactly the squared gain ratio.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    self, ChannelLayout, IngestError, LabelKind, LabelSpan, Manifest, ManifestEntry, Recording,
    NON_EEG_CHANNELS,
};

/// Largest absolute carrier amplitude, in microvolts, before noise.
pub const PEAK_UV: f64 = 100.0;

/// Sinusoids per carrier.
pub const TONES: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("band {low}..{high} Hz must satisfy 0 < low < high < {nyquist} Hz")]
    BadBand { low: f64, high: f64, nyquist: f64 },
    #[error("need at least 2 class profiles, got {0}")]
    TooFewProfiles(usize),
    #[error("profile {name:?} has {found} channel gains, layout has {expected} channels")]
    GainCount {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("profile {0:?} has a non-positive channel gain")]
    BadGain(String),
    #[error("invalid generation parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("profile file: {0}")]
    ProfileFile(String),
}

/// Per-class generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub name: String,
    pub channel_gains: Vec<f64>,
    pub band_hz: (f64, f64),
    /// `null` in JSON switches noise off.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Contents of a profiles file: which label the profile names are values
/// of, the channel names (montage default), and the profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSet {
    pub label_kind: LabelKind,
    #[serde(default)]
    pub channels: Option<Vec<String>>,
    pub profiles: Vec<ClassProfile>,
}

impl ProfileSet {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path)
            .map_err(|e| SynthError::ProfileFile(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| SynthError::ProfileFile(e.to_string()))
    }

    pub fn layout(&self) -> Result<ChannelLayout, SynthError> {
        Ok(match &self.channels {
            Some(names) => ChannelLayout::new(names.iter().cloned())?,
            None => {
                let n = self.profiles.first().map_or(0, |p| p.channel_gains.len());
                if n == 64 {
                    ChannelLayout::montage_64()
                } else {
                    ChannelLayout::numbered(n)
                }
            }
        })
    }

    /// Profiles over the 64-channel montage where class `c` raises
    /// `boosted` EEG channels (disjoint between classes, never the reference
    /// or eye channels) by `contrast_db` above a unit baseline. Every pair of
    /// one class's boosted channel with another's then differs by
    /// `2 * contrast_db` between the two classes' mean `E(n)`.
    pub fn contrast(
        label_kind: LabelKind,
        class_names: &[&str],
        boosted: usize,
        contrast_db: f64,
        band_hz: (f64, f64),
        snr_db: f64,
    ) -> Self {
        let layout = ChannelLayout::montage_64();
        let eeg: Vec<usize> = (0..layout.count())
            .filter(|&i| !NON_EEG_CHANNELS.contains(&layout.names()[i].as_str()))
            .collect();
        let gain = 10f64.powf(contrast_db / 20.0);
        let profiles = class_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let mut gains = vec![1.0; layout.count()];
                for &ch in eeg.iter().skip(c * boosted).take(boosted) {
                    gains[ch] = gain;
                }
                ClassProfile {
                    name: name.to_string(),
                    channel_gains: gains,
                    band_hz,
                    snr_db,
                }
            })
            .collect();
        Self {
            label_kind,
            channels: None,
            profiles,
        }
    }

    fn validate(&self, channels: usize, sample_rate_hz: f64) -> Result<(), SynthError> {
        if self.profiles.len() < 2 {
            return Err(SynthError::TooFewProfiles(self.profiles.len()));
        }
        let nyquist = sample_rate_hz / 2.0;
        for p in &self.profiles {
            self.label_kind.check_value(&p.name)?;
            if p.channel_gains.len() != channels {
                return Err(SynthError::GainCount {
                    name: p.name.clone(),
                    expected: channels,
                    found: p.channel_gains.len(),
                });
            }
            if !p.channel_gains.iter().all(|g| *g > 0.0 && g.is_finite()) {
                return Err(SynthError::BadGain(p.name.clone()));
            }
            let (low, high) = p.band_hz;
            if !(low > 0.0 && low < high && high < nyquist) {
                return Err(SynthError::BadBand { low, high, nyquist });
            }
            if p.snr_db.is_nan() {
                return Err(SynthError::InvalidParameter(format!(
                    "SNR of {:?} is NaN",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// Generates one recording with `spans_per_class` spans of every class in a
/// seed-shuffled order, back to back. Samples are rounded to `f32` so the
/// result survives the file format unchanged.
pub fn generate(
    set: &ProfileSet,
    spans_per_class: usize,
    span_s: f64,
    sample_rate_hz: f64,
    seed: u64,
) -> Result<Recording, SynthError> {
    if spans_per_class == 0 {
        return Err(SynthError::InvalidParameter(
            "spans_per_class must be positive".into(),
        ));
    }
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(SynthError::InvalidParameter(format!(
            "sample rate {sample_rate_hz}"
        )));
    }
    let span_len = (span_s * sample_rate_hz).round() as usize;
    if !(span_s.is_finite() && span_len > 0) {
        return Err(SynthError::InvalidParameter(format!(
            "span length {span_s} s"
        )));
    }
    let layout = set.layout()?;
    set.validate(layout.count(), sample_rate_hz)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(spans_per_class * set.profiles.len());
    for _ in 0..spans_per_class {
        let mut round: Vec<usize> = (0..set.profiles.len()).collect();
        round.shuffle(&mut rng);
        order.extend(round);
    }
    let span_seeds: Vec<u64> = order.iter().map(|_| rng.next_u64()).collect();

    let channels = layout.count();
    let mut samples = Array2::<f64>::zeros((channels, span_len * order.len()));
    let mut spans = Vec::with_capacity(order.len());
    for (k, (&class, &span_seed)) in order.iter().zip(&span_seeds).enumerate() {
        let profile = &set.profiles[class];
        let block = span_block(profile, span_len, sample_rate_hz, span_seed);
        samples
            .slice_mut(ndarray::s![.., k * span_len..(k + 1) * span_len])
            .assign(&block);
        let start = (k * span_len) as f64 / sample_rate_hz;
        let end = ((k + 1) * span_len) as f64 / sample_rate_hz;
        spans.push(LabelSpan::new(start, end).with_label(set.label_kind, profile.name.clone()));
    }
    Ok(Recording::new(sample_rate_hz, layout, samples)?
        .with_annotations(format!("synth-{seed}"), spans)?)
}

fn span_block(profile: &ClassProfile, len: usize, rate: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (low, high) = profile.band_hz;
    let tones: Vec<(f64, f64)> = (0..TONES)
        .map(|_| (rng.random_range(low..=high), rng.random_range(0.0..TAU)))
        .collect();
    let max_gain = profile.channel_gains.iter().cloned().fold(0.0, f64::max);
    let amp = PEAK_UV / (max_gain * TONES as f64);
    let carrier: Vec<f64> = (0..len)
        .map(|t| {
            let time = t as f64 / rate;
            amp * tones
                .iter()
                .map(|(f, ph)| (TAU * f * time + ph).sin())
                .sum::<f64>()
        })
        .collect();
    // Mean power of a sum of unit sinusoids at distinct frequencies.
    let carrier_rms = amp * (TONES as f64 / 2.0).sqrt();
    let noise_ratio = 10f64.powf(-profile.snr_db / 20.0);

    let mut block = Array2::zeros((profile.channel_gains.len(), len));
    for (m, &gain) in profile.channel_gains.iter().enumerate() {
        let mut row = block.row_mut(m);
        for (dst, c) in row.iter_mut().zip(&carrier) {
            *dst = gain * c;
        }
        if noise_ratio > 0.0 {
            let normal = Normal::new(0.0, gain * carrier_rms * noise_ratio).expect("finite std");
            for dst in row.iter_mut() {
                *dst += normal.sample(&mut rng);
            }
        }
        row.mapv_inplace(|v| v as f32 as f64);
    }
    block
}

/// Writes `subjects` recordings (`synth-01.eegr`, ...) and `manifest.json`
/// into `out_dir`. Recording `s` is generated with seed `seed + s`.
pub fn write_synthetic(
    out_dir: &Path,
    set: &ProfileSet,
    subjects: usize,
    spans_per_class: usize,
    span_s: f64,
    sample_rate_hz: f64,
    seed: u64,
) -> Result<Manifest, SynthError> {
    fs::create_dir_all(out_dir).map_err(|source| IngestError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(subjects);
    for s in 0..subjects {
        let rec = generate(
            set,
            spans_per_class,
            span_s,
            sample_rate_hz,
            seed.wrapping_add(s as u64),
        )?;
        let file = format!("synth-{:02}.eegr", s + 1);
        ingest::write_recording(&out_dir.join(&file), &rec)?;
        entries.push(ManifestEntry {
            path: file,
            subject: format!("synth-{:02}", s + 1),
            spans: rec.segments.clone(),
        });
    }
    let manifest = Manifest {
        base_dir: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{energy_diff_matrix, energy_vector};
    use crate::segmentation::segment;

    fn two_channel(snr_db: f64) -> ProfileSet {
        ProfileSet {
            label_kind: LabelKind::AudioType,
            channels: None,
            profiles: vec![
                ClassProfile {
                    name: "V".into(),
                    channel_gains: vec![1.0, 10.0],
                    band_hz: (8.0, 30.0),
                    snr_db,
                },
                ClassProfile {
                    name: "M".into(),
                    channel_gains: vec![10.0, 1.0],
                    band_hz: (8.0, 30.0),
                    snr_db,
                },
            ],
        }
    }

    #[test]
    fn noiseless_gain_ratio_gives_20_db() {
        let rec = generate(&two_channel(f64::INFINITY), 2, 2.0, 500.0, 4).unwrap();
        for span in rec
            .segments
            .iter()
            .filter(|s| s.labels[&LabelKind::AudioType] == "V")
        {
            for t in segment(&rec, span, 0.4, 0.5).unwrap() {
                let e = energy_diff_matrix(&energy_vector(&t).unwrap()).unwrap();
                assert!((e.m[[1, 0]] - 20.0).abs() < 0.5, "{}", e.m[[1, 0]]);
            }
        }
    }

    #[test]
    fn deterministic_and_round_trips() {
        let set = two_channel(10.0);
        let a = generate(&set, 3, 1.0, 250.0, 77).unwrap();
        let b = generate(&set, 3, 1.0, 250.0, 77).unwrap();
        assert_eq!(a, b);
        let c = generate(&set, 3, 1.0, 250.0, 78).unwrap();
        assert_ne!(a.samples, c.samples);
        let back = ingest::decode_recording(&ingest::encode_recording(&a)).unwrap();
        assert_eq!(back.samples, a.samples);
        assert_eq!(back.layout, a.layout);
    }

    #[test]
    fn spans_tile_the_recording() {
        let rec = generate(&two_channel(5.0), 4, 1.5, 200.0, 1).unwrap();
        assert_eq!(rec.segments.len(), 8);
        assert_eq!(rec.sample_count(), 8 * 300);
        let v = rec
            .segments
            .iter()
            .filter(|s| s.labels[&LabelKind::AudioType] == "V")
            .count();
        assert_eq!(v, 4);
        for w in rec.segments.windows(2) {
            assert_eq!(w[0].end_s, w[1].start_s);
        }
        assert!(rec.samples.iter().all(|v| v.abs() < 10.0 * PEAK_UV));
    }

    #[test]
    fn band_validation() {
        let mut set = two_channel(5.0);
        set.profiles[0].band_hz = (10.0, 300.0);
        assert!(matches!(
            generate(&set, 1, 1.0, 500.0, 0),
            Err(SynthError::BadBand { .. })
        ));
        set.profiles[0].band_hz = (0.0, 20.0);
        assert!(matches!(
            generate(&set, 1, 1.0, 500.0, 0),
            Err(SynthError::BadBand { .. })
        ));
    }

    #[test]
    fn profile_checks() {
        let mut set = two_channel(5.0);
        set.profiles.truncate(1);
        assert!(matches!(
            generate(&set, 1, 1.0, 500.0, 0),
            Err(SynthError::TooFewProfiles(1))
        ));
        let mut set = two_channel(5.0);
        set.profiles[1].name = "X".into();
        assert!(generate(&set, 1, 1.0, 500.0, 0).is_err());
        let mut set = two_channel(5.0);
        set.profiles[1].channel_gains = vec![1.0, 0.0];
        assert!(matches!(
            generate(&set, 1, 1.0, 500.0, 0),
            Err(SynthError::BadGain(_))
        ));
    }

    #[test]
    fn contrast_profiles_avoid_non_eeg_channels() {
        let set = ProfileSet::contrast(
            LabelKind::AudioType,
            &["M", "V"],
            5,
            10.0,
            (8.0, 30.0),
            20.0,
        );
        let layout = set.layout().unwrap();
        assert_eq!(layout.count(), 64);
        for p in &set.profiles {
            let boosted: Vec<&str> = p
                .channel_gains
                .iter()
                .enumerate()
                .filter(|(_, g)| **g > 1.0)
                .map(|(i, _)| layout.names()[i].as_str())
                .collect();
            assert_eq!(boosted.len(), 5);
            assert!(boosted.iter().all(|n| !NON_EEG_CHANNELS.contains(n)));
        }
    }

    #[test]
    fn profile_json_null_snr_means_noise_off() {
        let json = r#"{"label_kind":"audio_type","profiles":[
            {"name":"V","channel_gains":[1,10],"band_hz":[8,30],"snr_db":null},
            {"name":"M","channel_gains":[10,1],"band_hz":[8,30],"snr_db":12.5}]}"#;
        let set: ProfileSet = serde_json::from_str(json).unwrap();
        assert!(set.profiles[0].snr_db.is_infinite());
        assert_eq!(set.profiles[1].snr_db, 12.5);
        let back: ProfileSet = serde_json::from_str(&serde_json::to_string(&set).unwrap()).unwrap();
        assert_eq!(back, set);
    }
}
