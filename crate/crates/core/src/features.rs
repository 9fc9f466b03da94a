//! Per-channel spectral energy and the inter-channel energy difference
//! matrices built from it.
//!
//! For trial `n` the energy of channel `m` is taken over the full two-sided
//! DFT, `e = (1/N) * sum_k |X[k]|^2`, which by Parseval equals the time-domain
//! sum of squares. Energies go to dB, and the `C x C` matrix `E(n)` holds
//! `E[i][j] = dB_i - dB_j`. The derivative matrix is the centered difference
//! `(E(n+1) - E(n-1)) / 2`, i.e. the mean of the forward differences at `n`
//! and `n - 1` with unit step.

use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Recording;
use crate::segmentation::{SegmentPlan, Trial};

/// Linear energies below this are clamped before taking the logarithm so a
/// silent channel maps to -300 dB instead of -inf.
pub const ENERGY_FLOOR: f64 = 1e-30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("negative energy {0}")]
    NegativeEnergy(f64),
    #[error("channel {index} out of range for {count} channels")]
    ChannelOutOfRange { index: usize, count: usize },
    #[error("need at least 2 channels, got {0}")]
    TooFewChannels(usize),
    #[error("matrix shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("derivative needs plain energy difference matrices")]
    KindMismatch,
    #[error("derivative features need at least 3 consecutive trials, got {0}")]
    TooFewTrials(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// `E(n)`
    Plain,
    /// `E'(n)`
    #[serde(alias = "deriv")]
    Derivative,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Plain => "plain",
            FeatureKind::Derivative => "derivative",
        }
    }
}

/// How a `C x C` matrix becomes a sequence: one timestep per row (default)
/// or one per column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    Rows,
    Columns,
}

/// Two-sided DFT of one channel of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
    pub bin_hz: f64,
}

impl Spectrum {
    /// `(1/N) * sum |X[k]|^2`.
    pub fn energy(&self) -> f64 {
        let n = self.bins.len() as f64;
        self.bins.iter().map(|c| c.norm_sqr()).sum::<f64>() / n
    }
}

/// A forward FFT plan for one trial length, shareable across threads.
#[derive(Clone)]
pub struct SpectralEnergy {
    fft: Arc<dyn Fft<f64>>,
    len: usize,
}

impl SpectralEnergy {
    pub fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        Self { fft, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spectrum(&self, x: ArrayView1<'_, f64>, sample_rate_hz: f64) -> Spectrum {
        assert_eq!(x.len(), self.len, "signal length does not match the plan");
        let mut bins: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.process(&mut bins);
        Spectrum {
            bins,
            bin_hz: sample_rate_hz / self.len as f64,
        }
    }

    pub fn energy(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.spectrum(x, 1.0).energy()
    }

    /// dB energy of every row of a channels x samples block.
    pub fn energy_vector(&self, block: ArrayView2<'_, f64>) -> Result<EnergyVector, FeatureError> {
        let values_db = block
            .rows()
            .into_iter()
            .map(|row| energy_db(self.energy(row)))
            .collect::<Result<_, _>>()?;
        Ok(EnergyVector { values_db })
    }
}

impl std::fmt::Debug for SpectralEnergy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralEnergy")
            .field("len", &self.len)
            .finish()
    }
}

/// Sum of squares in the time domain.
pub fn time_domain_energy(x: ArrayView1<'_, f64>) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Linear energy of channel `m` (0-based) of `trial`, via the spectrum.
pub fn channel_energy(trial: &Trial, m: usize) -> Result<f64, FeatureError> {
    if m >= trial.channel_count() {
        return Err(FeatureError::ChannelOutOfRange {
            index: m,
            count: trial.channel_count(),
        });
    }
    Ok(SpectralEnergy::new(trial.len()).energy(trial.samples.row(m)))
}

pub fn energy_db(e: f64) -> Result<f64, FeatureError> {
    if e < 0.0 || e.is_nan() {
        return Err(FeatureError::NegativeEnergy(e));
    }
    Ok(10.0 * e.max(ENERGY_FLOOR).log10())
}

/// One dB energy per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyVector {
    pub values_db: Vec<f64>,
}

impl EnergyVector {
    pub fn len(&self) -> usize {
        self.values_db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values_db.is_empty()
    }
}

pub fn energy_vector(trial: &Trial) -> Result<EnergyVector, FeatureError> {
    SpectralEnergy::new(trial.len()).energy_vector(trial.samples.view())
}

/// Energy vectors of every trial of a span, computed in parallel. Output
/// order follows trial order regardless of scheduling.
pub fn span_energy_vectors(
    r: &Recording,
    plan: &SegmentPlan,
) -> Result<Vec<EnergyVector>, FeatureError> {
    let engine = SpectralEnergy::new(plan.trial_len);
    (0..plan.count)
        .into_par_iter()
        .map(|k| engine.energy_vector(plan.view(r, k)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    Plain,
    Derivative,
}

/// `C x C` dB difference matrix, or its temporal derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyDiffMatrix {
    pub m: Array2<f64>,
    pub kind: MatrixKind,
}

impl EnergyDiffMatrix {
    pub fn channels(&self) -> usize {
        self.m.nrows()
    }
}

pub fn energy_diff_matrix(ev: &EnergyVector) -> Result<EnergyDiffMatrix, FeatureError> {
    let c = ev.len();
    if c < 2 {
        return Err(FeatureError::TooFewChannels(c));
    }
    let v = &ev.values_db;
    Ok(EnergyDiffMatrix {
        m: Array2::from_shape_fn((c, c), |(i, j)| v[i] - v[j]),
        kind: MatrixKind::Plain,
    })
}

/// Centered derivative at `n` from `E(n-1)` and `E(n+1)`.
pub fn derivative_matrix(
    prev: &EnergyDiffMatrix,
    next: &EnergyDiffMatrix,
) -> Result<EnergyDiffMatrix, FeatureError> {
    if prev.kind != MatrixKind::Plain || next.kind != MatrixKind::Plain {
        return Err(FeatureError::KindMismatch);
    }
    if prev.m.dim() != next.m.dim() {
        return Err(FeatureError::ShapeMismatch(prev.m.dim(), next.m.dim()));
    }
    let mut m = &next.m - &prev.m;
    m.mapv_inplace(|v| v / 2.0);
    Ok(EnergyDiffMatrix {
        m,
        kind: MatrixKind::Derivative,
    })
}

/// A matrix presented to the network as `steps` vectors of `features`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub rows: Array2<f64>,
}

impl FeatureSequence {
    pub fn from_matrix(m: &EnergyDiffMatrix, orientation: Orientation) -> Self {
        let rows = match orientation {
            Orientation::Rows => m.m.clone(),
            Orientation::Columns => m.m.t().to_owned(),
        };
        Self { rows }
    }

    pub fn new(rows: Array2<f64>) -> Self {
        Self { rows }
    }

    /// `(steps, features)`
    pub fn shape(&self) -> (usize, usize) {
        self.rows.dim()
    }

    pub fn steps(&self) -> usize {
        self.rows.nrows()
    }

    pub fn features(&self) -> usize {
        self.rows.ncols()
    }
}

/// One sequence per trial (plain) or per interior trial (derivative, the
/// first and last trials only serve as neighbours).
pub fn featurize(
    trials: &[Trial],
    kind: FeatureKind,
) -> Result<Vec<FeatureSequence>, FeatureError> {
    featurize_with(trials, kind, Orientation::Rows)
}

pub fn featurize_with(
    trials: &[Trial],
    kind: FeatureKind,
    orientation: Orientation,
) -> Result<Vec<FeatureSequence>, FeatureError> {
    let Some(first) = trials.first() else {
        return Ok(Vec::new());
    };
    let engine = SpectralEnergy::new(first.len());
    let vectors = trials
        .par_iter()
        .map(|t| engine.energy_vector(t.samples.view()))
        .collect::<Result<Vec<_>, _>>()?;
    featurize_energy_vectors(&vectors, kind, orientation)
}

pub fn featurize_energy_vectors(
    vectors: &[EnergyVector],
    kind: FeatureKind,
    orientation: Orientation,
) -> Result<Vec<FeatureSequence>, FeatureError> {
    if kind == FeatureKind::Derivative && vectors.len() < 3 {
        return Err(FeatureError::TooFewTrials(vectors.len()));
    }
    let plain = vectors
        .iter()
        .map(energy_diff_matrix)
        .collect::<Result<Vec<_>, _>>()?;
    match kind {
        FeatureKind::Plain => Ok(plain
            .iter()
            .map(|m| FeatureSequence::from_matrix(m, orientation))
            .collect()),
        FeatureKind::Derivative => plain
            .windows(3)
            .map(|w| {
                derivative_matrix(&w[0], &w[2])
                    .map(|d| FeatureSequence::from_matrix(&d, orientation))
            })
            .collect(),
    }
}
