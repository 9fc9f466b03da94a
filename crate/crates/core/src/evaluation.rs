//! Balanced random splits, repeated train/test runs, confusion matrices and
//! the derived accuracy, precision, recall and F-score.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilstm::{self, BiLstmClassifier, ModelError, TrainConfig};
use crate::ingest::Dataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("class {class:?} has {count} items, need at least 2")]
    ClassTooSmall { class: String, count: usize },
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("truths and predictions differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("need at least one run")]
    NoRuns,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Undersamples every class to the smallest class count, then splits each
/// class into `train_frac` / rest. Returns `(train, test)` indices into the
/// dataset; both sides are class-balanced.
pub fn split_indices(
    dataset: &Dataset,
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(EvalError::InvalidFraction(train_frac));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_vocab.len()];
    for (i, (_, label)) in dataset.items.iter().enumerate() {
        by_class[*label].push(i);
    }
    for (class, members) in dataset.class_vocab.iter().zip(&by_class) {
        if members.len() < 2 {
            return Err(EvalError::ClassTooSmall {
                class: class.clone(),
                count: members.len(),
            });
        }
    }
    let keep = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let n_train = ((keep as f64 * train_frac).round() as usize).clamp(1, keep - 1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut members in by_class {
        members.shuffle(&mut rng);
        members.truncate(keep);
        test.extend_from_slice(&members[n_train..]);
        members.truncate(n_train);
        train.extend(members);
    }
    Ok((train, test))
}

pub fn split_balanced(
    dataset: &Dataset,
    train_frac: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), EvalError> {
    let (train, test) = split_indices(dataset, train_frac, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_vocab: Vec<String>,
}

impl ConfusionMatrix {
    pub fn zeros(class_vocab: Vec<String>) -> Self {
        let k = class_vocab.len();
        Self {
            counts: vec![vec![0; k]; k],
            class_vocab,
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>, class_vocab: Vec<String>) -> Self {
        assert!(
            counts.len() == class_vocab.len()
                && counts.iter().all(|r| r.len() == class_vocab.len()),
            "confusion counts must be K x K"
        );
        Self {
            counts,
            class_vocab,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_vocab.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// Elementwise sum; both matrices must share the class vocabulary.
    pub fn add(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.class_vocab, other.class_vocab);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub fn confusion(
    truths: &[usize],
    preds: &[usize],
    class_vocab: Vec<String>,
) -> Result<ConfusionMatrix, EvalError> {
    if truths.len() != preds.len() {
        return Err(EvalError::LengthMismatch(truths.len(), preds.len()));
    }
    let k = class_vocab.len();
    let mut cm = ConfusionMatrix::zeros(class_vocab);
    for (&t, &p) in truths.iter().zip(preds) {
        for index in [t, p] {
            if index >= k {
                return Err(EvalError::IndexOutOfRange { index, classes: k });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Which class precision, recall and F-score describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positive {
    Class(usize),
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Set when the class was never predicted and precision is reported as 0.
    pub precision_undefined: bool,
    /// Set when the class never occurs and recall is reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn f_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn metrics(cm: &ConfusionMatrix, positive: Positive) -> Result<Metrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|k| {
            let (precision, precision_undefined) = ratio(cm.counts[k][k], cols[k]);
            let (recall, recall_undefined) = ratio(cm.counts[k][k], rows[k]);
            ClassMetrics {
                class: cm.class_vocab[k].clone(),
                precision,
                recall,
                f_score: f_score(precision, recall),
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    let (precision, recall, f) = match positive {
        Positive::Class(k) => {
            if k >= cm.classes() {
                return Err(EvalError::IndexOutOfRange {
                    index: k,
                    classes: cm.classes(),
                });
            }
            let c = &per_class[k];
            (c.precision, c.recall, c.f_score)
        }
        Positive::Macro => {
            let n = per_class.len() as f64;
            (
                per_class.iter().map(|c| c.precision).sum::<f64>() / n,
                per_class.iter().map(|c| c.recall).sum::<f64>() / n,
                per_class.iter().map(|c| c.f_score).sum::<f64>() / n,
            )
        }
    };
    Ok(Metrics {
        accuracy: cm.trace() as f64 / total as f64,
        precision,
        recall,
        f_score: f,
        per_class,
    })
}

/// Settings of one repeated train/test evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub runs: usize,
    pub train_frac: f64,
    /// Run `i` uses `seed + i` for splitting, initialization and shuffling.
    pub seed: u64,
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 10,
            train_frac: 0.5,
            seed: 0,
            hidden: 20,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub accuracy: f64,
    /// Binary tasks only; multi-class runs report accuracy alone.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_score: Option<f64>,
    pub loss_trace: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean of the per-run values.
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_score: Option<f64>,
    /// Elementwise sum of the per-run matrices.
    pub confusion: ConfusionMatrix,
}

/// What the evaluated features were; used for the table layout only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub feature_kind: String,
    pub trial_ms: f64,
    pub label_kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_vocab: Vec<String>,
    pub positive_class: Option<String>,
    pub runs: usize,
    pub config: EvalConfig,
    pub context: Option<ReportContext>,
    pub per_run_accuracies: Vec<f64>,
    pub per_run: Vec<RunResult>,
    pub aggregate: Aggregate,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.map(|v| mean(&v))
}

/// Split, train and test `cfg.runs` times, then average. Runs execute in
/// parallel; each is deterministic in its own seed and results are merged by
/// run index. Returns the report and the trained model of every run.
pub fn repeated_eval(
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<BiLstmClassifier>), EvalError> {
    if cfg.runs == 0 {
        return Err(EvalError::NoRuns);
    }
    cfg.train.validate()?;
    let features = dataset
        .sequence_shape()
        .map(|(_, f)| f)
        .ok_or(ModelError::EmptyDataset)?;
    let binary = dataset.class_vocab.len() == 2;
    let vocab = dataset.class_vocab.clone();

    let results: Vec<(RunResult, BiLstmClassifier)> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let seed = cfg.seed.wrapping_add(run as u64);
            let (train_set, test_set) = split_balanced(dataset, cfg.train_frac, seed)?;
            let init = BiLstmClassifier::init(features, cfg.hidden, vocab.clone(), seed)?;
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let (model, loss_trace) = bilstm::train(&init, &train_set, &tc)?;
            let mut truths = Vec::with_capacity(test_set.len());
            let mut preds = Vec::with_capacity(test_set.len());
            for (seq, label) in &test_set.items {
                truths.push(*label);
                preds.push(model.predict(seq)?);
            }
            let cm = confusion(&truths, &preds, vocab.clone())?;
            let m = metrics(&cm, Positive::Class(0))?;
            let result = RunResult {
                run,
                seed,
                train_size: train_set.len(),
                test_size: test_set.len(),
                accuracy: m.accuracy,
                precision: binary.then_some(m.precision),
                recall: binary.then_some(m.recall),
                f_score: binary.then_some(m.f_score),
                loss_trace,
                confusion: cm,
            };
            Ok((result, model))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let (per_run, models): (Vec<RunResult>, Vec<BiLstmClassifier>) = results.into_iter().unzip();
    let per_run_accuracies: Vec<f64> = per_run.iter().map(|r| r.accuracy).collect();
    let mut total = ConfusionMatrix::zeros(vocab.clone());
    for r in &per_run {
        total.add(&r.confusion);
    }
    let aggregate = Aggregate {
        accuracy: mean(&per_run_accuracies),
        precision: mean_opt(per_run.iter().map(|r| r.precision)),
        recall: mean_opt(per_run.iter().map(|r| r.recall)),
        f_score: mean_opt(per_run.iter().map(|r| r.f_score)),
        confusion: total,
    };
    let report = EvalReport {
        positive_class: binary.then(|| vocab[0].clone()),
        class_vocab: vocab,
        runs: cfg.runs,
        config: cfg.clone(),
        context: None,
        per_run_accuracies,
        per_run,
        aggregate,
    };
    Ok((report, models))
}

/// Evaluates one fixed model on a whole dataset.
pub fn evaluate_model(
    model: &BiLstmClassifier,
    dataset: &Dataset,
) -> Result<ConfusionMatrix, EvalError> {
    let mut truths = Vec::with_capacity(dataset.len());
    let mut preds = Vec::with_capacity(dataset.len());
    for (seq, label) in &dataset.items {
        truths.push(*label);
        preds.push(model.predict(seq)?);
    }
    confusion(&truths, &preds, dataset.class_vocab.clone())
}

/// Plain-text confusion chart: true classes down the side, predicted classes
/// along the bottom.
pub fn render_confusion(cm: &ConfusionMatrix) -> String {
    let label_w = cm.class_vocab.iter().map(String::len).max().unwrap_or(1);
    let cell_w = cm
        .counts
        .iter()
        .flatten()
        .map(|c| c.to_string().len())
        .chain(cm.class_vocab.iter().map(String::len))
        .max()
        .unwrap_or(1)
        + 2;
    let lead = "True Class";
    let mut out = String::new();
    for (i, row) in cm.counts.iter().enumerate() {
        let head = if i == 0 { lead } else { "" };
        let _ = write!(
            out,
            "{head:<w$}  {:<label_w$}",
            cm.class_vocab[i],
            w = lead.len()
        );
        for c in row {
            let _ = write!(out, "{c:>cell_w$}");
        }
        out.push('\n');
    }
    let pad = lead.len() + 2 + label_w;
    let _ = write!(out, "{:pad$}", "");
    for name in &cm.class_vocab {
        let _ = write!(out, "{name:>cell_w$}");
    }
    out.push('\n');
    let _ = writeln!(out, "{:pad$}  Predicted Class", "");
    out
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Metric table plus aggregate confusion chart.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let (matrix, duration) = match &report.context {
        Some(c) => (
            match c.feature_kind.as_str() {
                "derivative" => "E'(n)".to_string(),
                _ => "E(n)".to_string(),
            },
            if c.trial_ms >= 1000.0 && c.trial_ms % 1000.0 == 0.0 {
                format!("{} s", c.trial_ms / 1000.0)
            } else {
                format!("{} ms", c.trial_ms)
            },
        ),
        None => ("-".to_string(), "-".to_string()),
    };
    let a = &report.aggregate;
    match (a.precision, a.recall, a.f_score) {
        (Some(p), Some(r), Some(f)) => {
            let _ = writeln!(
                out,
                "Matrix\tDuration\tAccuracy (%)\tF-score (%)\tRecall (%)\tPrecision (%)"
            );
            let _ = writeln!(
                out,
                "{matrix}\t{duration}\t{}\t{}\t{}\t{}",
                pct(a.accuracy),
                pct(f),
                pct(r),
                pct(p)
            );
        }
        _ => {
            let _ = writeln!(out, "Matrix\tDuration\tAccuracy (%)");
            let _ = writeln!(out, "{matrix}\t{duration}\t{}", pct(a.accuracy));
        }
    }
    let _ = writeln!(
        out,
        "\n{} run(s); per-run accuracy (%): {}",
        report.runs,
        report
            .per_run_accuracies
            .iter()
            .map(|v| pct(*v))
            .collect::<Vec<_>>()
            .join(", ")
    );
    if let Some(p) = &report.positive_class {
        let _ = writeln!(out, "positive class: {p}");
    }
    out.push('\n');
    out.push_str(&render_confusion(&a.confusion));
    out
}
