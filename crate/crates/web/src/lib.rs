//! Browser bindings for three pipeline operations: the energy-difference
//! matrix of one synthetic trial, the trial layout of a span, and the
//! metrics of a confusion matrix. Each exported function returns JSON.

use eegclass_core::evaluation::{metrics, render_confusion, ConfusionMatrix, Metrics, Positive};
use eegclass_core::features::{energy_diff_matrix, SpectralEnergy};
use eegclass_core::ingest::LabelKind;
use eegclass_core::segmentation::{trial_count, window_geometry, SegmentPlan, SegmentationError};
use eegclass_core::synthgen::{generate, ClassProfile, ProfileSet};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// One synthetic trial and its `C x C` dB difference matrix, row-major.
#[derive(Debug, Serialize)]
pub struct TrialMatrix {
    pub channels: usize,
    pub energies_db: Vec<f64>,
    pub matrix: Vec<f64>,
}

/// Synthesizes a single trial whose channel amplitudes follow `gains_db`
/// (one entry per channel) and returns its energy-difference matrix.
pub fn trial_matrix(
    gains_db: &[f64],
    snr_db: f64,
    trial_ms: f64,
    rate_hz: f64,
    seed: u64,
) -> Result<TrialMatrix, String> {
    if gains_db.len() < 2 {
        return Err("need at least 2 channels".into());
    }
    if gains_db.iter().any(|g| !g.is_finite()) {
        return Err("channel gains must be finite".into());
    }
    let profile = |name: &str| ClassProfile {
        name: name.into(),
        channel_gains: gains_db.iter().map(|g| 10f64.powf(g / 20.0)).collect(),
        band_hz: (4.0, (30.0f64).min(rate_hz * 0.4)),
        snr_db,
    };
    // The generator wants two classes; both share the profile.
    let set = ProfileSet {
        label_kind: LabelKind::AudioType,
        channels: None,
        profiles: vec![profile("V"), profile("M")],
    };
    let trial_s = trial_ms / 1000.0;
    let rec = generate(&set, 1, trial_s, rate_hz, seed).map_err(|e| e.to_string())?;
    let plan = SegmentPlan::new(&rec, &rec.segments[0], trial_s, 0.5).map_err(|e| e.to_string())?;
    let ev = SpectralEnergy::new(plan.trial_len)
        .energy_vector(plan.view(&rec, 0))
        .map_err(|e| e.to_string())?;
    let m = energy_diff_matrix(&ev).map_err(|e| e.to_string())?;
    Ok(TrialMatrix {
        channels: m.channels(),
        energies_db: ev.values_db,
        matrix: m.m.iter().copied().collect(),
    })
}

/// Where the trials of one span fall.
#[derive(Debug, Serialize)]
pub struct Plan {
    pub span_samples: usize,
    pub trial_samples: usize,
    pub hop_samples: usize,
    pub count: usize,
    pub starts: Vec<usize>,
    /// Trailing samples not covered by any trial.
    pub unused_samples: usize,
}

pub fn plan(span_s: f64, rate_hz: f64, trial_ms: f64, overlap: f64) -> Result<Plan, String> {
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(format!("sample rate {rate_hz} must be positive"));
    }
    if !(span_s.is_finite() && span_s > 0.0) {
        return Err(format!("span {span_s} s must be positive"));
    }
    let (trial, hop) =
        window_geometry(trial_ms / 1000.0, overlap, rate_hz).map_err(|e| e.to_string())?;
    let span = (span_s * rate_hz).round() as usize;
    if span < trial {
        return Err(SegmentationError::SpanTooShort {
            span_samples: span,
            trial_samples: trial,
        }
        .to_string());
    }
    let count = trial_count(span, trial, hop);
    let starts: Vec<usize> = (0..count).map(|k| k * hop).collect();
    let covered = starts.last().map_or(0, |s| s + trial);
    Ok(Plan {
        span_samples: span,
        trial_samples: trial,
        hop_samples: hop,
        count,
        starts,
        unused_samples: span - covered,
    })
}

#[derive(Debug, Serialize)]
pub struct MetricsView {
    pub metrics: Metrics,
    pub chart: String,
}

/// `counts` is the row-major `K x K` matrix (rows are true classes) and
/// `names` the `K` class names. `positive` selects the class whose
/// precision/recall are reported; `None` averages over classes.
pub fn confusion_metrics(
    counts: &[u32],
    names: &[String],
    positive: Option<usize>,
) -> Result<MetricsView, String> {
    let k = names.len();
    if k < 2 {
        return Err("need at least 2 classes".into());
    }
    if counts.len() != k * k {
        return Err(format!(
            "{} counts for {k} classes, expected {}",
            counts.len(),
            k * k
        ));
    }
    let rows = counts
        .chunks(k)
        .map(|r| r.iter().map(|&c| u64::from(c)).collect())
        .collect();
    let cm = ConfusionMatrix::from_counts(rows, names.to_vec());
    let pos = positive.map_or(Positive::Macro, Positive::Class);
    let m = metrics(&cm, pos).map_err(|e| e.to_string())?;
    Ok(MetricsView {
        metrics: m,
        chart: render_confusion(&cm),
    })
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("plain data serializes"))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = trialMatrix)]
pub fn trial_matrix_js(
    gains_db: Vec<f64>,
    snr_db: f64,
    trial_ms: f64,
    rate_hz: f64,
    seed: u32,
) -> Result<String, JsError> {
    json(trial_matrix(
        &gains_db,
        snr_db,
        trial_ms,
        rate_hz,
        u64::from(seed),
    ))
}

#[wasm_bindgen(js_name = segmentPlan)]
pub fn plan_js(span_s: f64, rate_hz: f64, trial_ms: f64, overlap: f64) -> Result<String, JsError> {
    json(plan(span_s, rate_hz, trial_ms, overlap))
}

/// `names` is comma-separated; `positive < 0` means macro averaging.
#[wasm_bindgen(js_name = confusionMetrics)]
pub fn confusion_metrics_js(
    counts: Vec<u32>,
    names: &str,
    positive: i32,
) -> Result<String, JsError> {
    let names: Vec<String> = names.split(',').map(|s| s.trim().to_string()).collect();
    json(confusion_metrics(
        &counts,
        &names,
        usize::try_from(positive).ok(),
    ))
}
