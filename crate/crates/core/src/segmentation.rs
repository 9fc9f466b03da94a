//! Fixed-length, overlapping trial extraction.
//!
//! A span of `L` samples cut into trials of `T` samples with hop `H` yields
//! `floor((L - T) / H) + 1` trials starting at `span_start + k * H`. Trailing
//! samples that do not fill a whole trial are discarded.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2};
use thiserror::Error;

use crate::ingest::{LabelKind, LabelSpan, Recording};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("trial length must be positive, got {0} s")]
    BadTrialLength(f64),
    #[error("overlap fraction must lie in [0, 1), got {0}")]
    InvalidOverlap(f64),
    #[error("overlap {overlap} leaves a hop of zero samples")]
    ZeroHop { overlap: f64 },
    #[error("trial of {samples} samples is too short (need at least 2)")]
    TrialTooShort { samples: usize },
    #[error("span of {span_samples} samples is shorter than one trial of {trial_samples}")]
    SpanTooShort {
        span_samples: usize,
        trial_samples: usize,
    },
    #[error("span {start_s}..{end_s} s does not fit the recording")]
    SpanOutOfRange { start_s: f64, end_s: f64 },
}

/// Validates duration and overlap independent of any sample rate. An
/// overlap of 1 or more can never advance, so it is reported as `ZeroHop`.
pub fn check_params(trial_len_s: f64, overlap_frac: f64) -> Result<(), SegmentationError> {
    if !(trial_len_s.is_finite() && trial_len_s > 0.0) {
        return Err(SegmentationError::BadTrialLength(trial_len_s));
    }
    if overlap_frac >= 1.0 {
        return Err(SegmentationError::ZeroHop {
            overlap: overlap_frac,
        });
    }
    // Also catches NaN.
    if overlap_frac.is_nan() || overlap_frac < 0.0 {
        return Err(SegmentationError::InvalidOverlap(overlap_frac));
    }
    Ok(())
}

/// `(trial_len_samples, hop_samples)` for a duration, overlap and rate.
pub fn window_geometry(
    trial_len_s: f64,
    overlap_frac: f64,
    sample_rate_hz: f64,
) -> Result<(usize, usize), SegmentationError> {
    check_params(trial_len_s, overlap_frac)?;
    let trial = (trial_len_s * sample_rate_hz).round() as usize;
    if trial < 2 {
        return Err(SegmentationError::TrialTooShort { samples: trial });
    }
    let hop = (trial as f64 * (1.0 - overlap_frac)).round() as usize;
    if hop == 0 {
        return Err(SegmentationError::ZeroHop {
            overlap: overlap_frac,
        });
    }
    Ok((trial, hop))
}

/// Number of whole windows of `trial` samples, advancing by `hop`, in a span
/// of `span` samples.
pub fn trial_count(span: usize, trial: usize, hop: usize) -> usize {
    if span < trial || hop == 0 {
        0
    } else {
        (span - trial) / hop + 1
    }
}

/// Where every trial of one span starts, without copying any samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPlan {
    pub span_start: usize,
    pub span_len: usize,
    pub trial_len: usize,
    pub hop: usize,
    pub count: usize,
    pub sample_rate_hz: f64,
    pub labels: BTreeMap<LabelKind, String>,
}

impl SegmentPlan {
    pub fn new(
        r: &Recording,
        span: &LabelSpan,
        trial_len_s: f64,
        overlap_frac: f64,
    ) -> Result<Self, SegmentationError> {
        let (trial_len, hop) = window_geometry(trial_len_s, overlap_frac, r.sample_rate_hz)?;
        let start = (span.start_s * r.sample_rate_hz).round();
        let end = (span.end_s * r.sample_rate_hz).round();
        if !(start >= 0.0 && start < end && end as usize <= r.sample_count()) {
            return Err(SegmentationError::SpanOutOfRange {
                start_s: span.start_s,
                end_s: span.end_s,
            });
        }
        let (span_start, span_len) = (start as usize, (end - start) as usize);
        if span_len < trial_len {
            return Err(SegmentationError::SpanTooShort {
                span_samples: span_len,
                trial_samples: trial_len,
            });
        }
        Ok(Self {
            span_start,
            span_len,
            trial_len,
            hop,
            count: trial_count(span_len, trial_len, hop),
            sample_rate_hz: r.sample_rate_hz,
            labels: span.labels.clone(),
        })
    }

    /// Absolute start sample of each trial.
    pub fn starts(&self) -> impl ExactSizeIterator<Item = usize> + '_ {
        (0..self.count).map(move |k| self.span_start + k * self.hop)
    }

    /// Borrowed channels x trial_len view of trial `k`.
    pub fn view<'a>(&self, r: &'a Recording, k: usize) -> ArrayView2<'a, f64> {
        let start = self.span_start + k * self.hop;
        r.samples.slice(s![.., start..start + self.trial_len])
    }

    pub fn trial(&self, r: &Recording, k: usize) -> Trial {
        Trial {
            index: k,
            start_sample: self.span_start + k * self.hop,
            samples: self.view(r, k).to_owned(),
            sample_rate_hz: self.sample_rate_hz,
            labels: self.labels.clone(),
        }
    }
}

/// One windowed slice of a recording, all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub start_sample: usize,
    pub samples: Array2<f64>,
    pub sample_rate_hz: f64,
    pub labels: BTreeMap<LabelKind, String>,
}

impl Trial {
    pub fn channel_count(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Cuts one span of `r` into overlapping trials, in order.
pub fn segment(
    r: &Recording,
    span: &LabelSpan,
    trial_len_s: f64,
    overlap_frac: f64,
) -> Result<Vec<Trial>, SegmentationError> {
    let plan = SegmentPlan::new(r, span, trial_len_s, overlap_frac)?;
    Ok((0..plan.count).map(|k| plan.trial(r, k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ChannelLayout;
    use ndarray::Array;

    fn ramp(channels: usize, seconds: f64, rate: f64) -> Recording {
        let n = (seconds * rate).round() as usize;
        let data = Array::from_shape_fn((channels, n), |(c, t)| (c * n + t) as f64);
        Recording::new(rate, ChannelLayout::numbered(channels), data).unwrap()
    }

    /// Every start index whose window fits, found by walking the span.
    fn enumerate_starts(span_len: usize, trial: usize, hop: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut s = 0;
        while s + trial <= span_len {
            out.push(s);
            s += hop;
        }
        out
    }

    #[test]
    fn thirty_seconds_400ms_half_overlap() {
        let (t, h) = window_geometry(0.4, 0.5, 2500.0).unwrap();
        assert_eq!((t, h), (1000, 500));
        assert_eq!(trial_count(75_000, t, h), 149);
        assert_eq!(enumerate_starts(75_000, t, h).len(), 149);
    }

    #[test]
    fn five_seconds_1s_half_overlap() {
        let (t, h) = window_geometry(1.0, 0.5, 2500.0).unwrap();
        assert_eq!((t, h), (2500, 1250));
        assert_eq!(trial_count(12_500, t, h), 9);
        assert_eq!(enumerate_starts(12_500, t, h).len(), 9);
    }

    #[test]
    fn span_of_exactly_one_trial() {
        let r = ramp(3, 1.0, 100.0);
        for overlap in [0.0, 0.25, 0.5, 0.9] {
            let span = LabelSpan::new(0.0, 0.4);
            let trials = segment(&r, &span, 0.4, overlap).unwrap();
            assert_eq!(trials.len(), 1);
            assert_eq!(trials[0].samples, r.samples.slice(s![.., 0..40]));
        }
    }

    #[test]
    fn half_overlap_shares_halves() {
        let r = ramp(4, 3.0, 100.0);
        let span = LabelSpan::new(0.5, 2.9);
        let trials = segment(&r, &span, 0.4, 0.5).unwrap();
        for pair in trials.windows(2) {
            assert_eq!(
                pair[0].samples.slice(s![.., 20..40]),
                pair[1].samples.slice(s![.., 0..20])
            );
            assert_eq!(pair[1].start_sample - pair[0].start_sample, 20);
        }
        let last = trials.last().unwrap();
        assert!(last.start_sample + last.len() <= 290);
    }

    #[test]
    fn errors() {
        let r = ramp(2, 1.0, 100.0);
        let span = LabelSpan::new(0.0, 0.3);
        assert!(matches!(
            segment(&r, &span, 0.4, 0.5),
            Err(SegmentationError::SpanTooShort { .. })
        ));
        let span = LabelSpan::new(0.0, 1.0);
        assert!(matches!(
            segment(&r, &span, 0.4, 0.999),
            Err(SegmentationError::ZeroHop { .. })
        ));
        assert!(matches!(
            segment(&r, &span, 0.4, 1.0),
            Err(SegmentationError::ZeroHop { .. })
        ));
        assert!(matches!(
            segment(&r, &span, 0.4, -0.1),
            Err(SegmentationError::InvalidOverlap(_))
        ));
        assert!(matches!(
            segment(&r, &span, 0.01, 0.0),
            Err(SegmentationError::TrialTooShort { samples: 1 })
        ));
    }

    proptest::proptest! {
        #[test]
        fn plan_matches_enumeration(span_len in 2usize..5000, trial in 2usize..600, overlap in 0.0f64..0.95) {
            let hop = (trial as f64 * (1.0 - overlap)).round() as usize;
            proptest::prop_assume!(hop > 0 && span_len >= trial);
            let starts = enumerate_starts(span_len, trial, hop);
            proptest::prop_assert_eq!(trial_count(span_len, trial, hop), starts.len());
            for (k, s) in starts.iter().enumerate() {
                proptest::prop_assert_eq!(*s, k * hop);
                proptest::prop_assert!(s + trial <= span_len);
            }
        }
    }
}
