//! Bidirectional LSTM sequence classifier with hand-written backpropagation
//! through time.
//!
//! Each direction runs a standard LSTM cell over the sequence (the backward
//! direction over the reversed sequence). Gate pre-activations are stacked
//! as `[input, forget, cell candidate, output]` blocks of `H` rows:
//!
//! ```text
//! z  = W x_t + U h_{t-1} + b
//! i  = sigmoid(z_i)   f = sigmoid(z_f)   g = tanh(z_g)   o = sigmoid(z_o)
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! ```
//!
//! The final hidden states of both directions are concatenated (`2H`),
//! mapped to `K` logits by a fully connected layer and normalized by
//! softmax. Training minimizes cross-entropy with Adam.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSequence;
use crate::ingest::Dataset;

/// Lower bound on the probability inside the log of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sequence has {found} features per step, model expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("sequence has no steps")]
    EmptySequence,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("model class vocabulary {model:?} differs from dataset {dataset:?}")]
    VocabMismatch {
        model: Vec<String>,
        dataset: Vec<String>,
    },
}

/// Weights of one LSTM direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirectionParams {
    /// `4H x F`
    pub w: Array2<f64>,
    /// `4H x H`
    pub u: Array2<f64>,
    /// `4H`
    pub b: Array1<f64>,
}

impl LstmDirectionParams {
    pub fn zeros(features: usize, hidden: usize) -> Self {
        Self {
            w: Array2::zeros((4 * hidden, features)),
            u: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    pub fn features(&self) -> usize {
        self.w.ncols()
    }

    fn init(features: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(features, hidden);
        p.w.mapv_inplace(|_| rng.random_range(-bound..=bound));
        p.u.mapv_inplace(|_| rng.random_range(-bound..=bound));
        p.b.slice_mut(ndarray::s![hidden..2 * hidden]).fill(1.0);
        p
    }
}

/// Both LSTM directions plus the fully connected head.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmClassifier {
    pub fwd: LstmDirectionParams,
    pub bwd: LstmDirectionParams,
    /// `K x 2H`
    pub fc_w: Array2<f64>,
    /// `K`
    pub fc_b: Array1<f64>,
    pub class_vocab: Vec<String>,
}

/// Gradient of the loss, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub fwd: LstmDirectionParams,
    pub bwd: LstmDirectionParams,
    pub fc_w: Array2<f64>,
    pub fc_b: Array1<f64>,
}

/// Flat views of every parameter tensor in checkpoint order:
/// fwd.W, fwd.U, fwd.b, bwd.W, bwd.U, bwd.b, fc_w, fc_b.
pub trait ParamTensors {
    fn tensors(&self) -> [&[f64]; 8];
    fn tensors_mut(&mut self) -> [&mut [f64]; 8];

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

macro_rules! impl_param_tensors {
    ($t:ty) => {
        impl ParamTensors for $t {
            fn tensors(&self) -> [&[f64]; 8] {
                [
                    self.fwd.w.as_slice().expect("standard layout"),
                    self.fwd.u.as_slice().expect("standard layout"),
                    self.fwd.b.as_slice().expect("standard layout"),
                    self.bwd.w.as_slice().expect("standard layout"),
                    self.bwd.u.as_slice().expect("standard layout"),
                    self.bwd.b.as_slice().expect("standard layout"),
                    self.fc_w.as_slice().expect("standard layout"),
                    self.fc_b.as_slice().expect("standard layout"),
                ]
            }

            fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
                [
                    self.fwd.w.as_slice_mut().expect("standard layout"),
                    self.fwd.u.as_slice_mut().expect("standard layout"),
                    self.fwd.b.as_slice_mut().expect("standard layout"),
                    self.bwd.w.as_slice_mut().expect("standard layout"),
                    self.bwd.u.as_slice_mut().expect("standard layout"),
                    self.bwd.b.as_slice_mut().expect("standard layout"),
                    self.fc_w.as_slice_mut().expect("standard layout"),
                    self.fc_b.as_slice_mut().expect("standard layout"),
                ]
            }
        }
    };
}

impl_param_tensors!(BiLstmClassifier);
impl_param_tensors!(Gradients);

impl Gradients {
    pub fn zeros_like(model: &BiLstmClassifier) -> Self {
        let (f, h, k) = (model.features(), model.hidden(), model.classes());
        Self {
            fwd: LstmDirectionParams::zeros(f, h),
            bwd: LstmDirectionParams::zeros(f, h),
            fc_w: Array2::zeros((k, 2 * h)),
            fc_b: Array1::zeros(k),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl BiLstmClassifier {
    /// All-zero parameters.
    pub fn zeros(
        features: usize,
        hidden: usize,
        class_vocab: Vec<String>,
    ) -> Result<Self, ModelError> {
        if class_vocab.len() < 2 {
            return Err(ModelError::TooFewClasses(class_vocab.len()));
        }
        if features == 0 || hidden == 0 {
            return Err(ModelError::InvalidConfig(
                "features and hidden must be positive".into(),
            ));
        }
        let k = class_vocab.len();
        Ok(Self {
            fwd: LstmDirectionParams::zeros(features, hidden),
            bwd: LstmDirectionParams::zeros(features, hidden),
            fc_w: Array2::zeros((k, 2 * hidden)),
            fc_b: Array1::zeros(k),
            class_vocab,
        })
    }

    /// Weights uniform in `[-1/sqrt(H), 1/sqrt(H)]`, biases zero except the
    /// forget gate bias, which starts at 1.
    pub fn init(
        features: usize,
        hidden: usize,
        class_vocab: Vec<String>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut model = Self::zeros(features, hidden, class_vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.fwd = LstmDirectionParams::init(features, hidden, &mut rng);
        model.bwd = LstmDirectionParams::init(features, hidden, &mut rng);
        let bound = 1.0 / (hidden as f64).sqrt();
        model
            .fc_w
            .mapv_inplace(|_| rng.random_range(-bound..=bound));
        Ok(model)
    }

    pub fn features(&self) -> usize {
        self.fwd.features()
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    pub fn classes(&self) -> usize {
        self.class_vocab.len()
    }

    fn check(&self, seq: &FeatureSequence) -> Result<(), ModelError> {
        if seq.steps() == 0 {
            return Err(ModelError::EmptySequence);
        }
        if seq.features() != self.features() {
            return Err(ModelError::ShapeMismatch {
                expected: self.features(),
                found: seq.features(),
            });
        }
        Ok(())
    }

    fn run(&self, seq: &FeatureSequence) -> Pass {
        let steps = seq.steps();
        let fwd = run_direction(&self.fwd, seq, (0..steps).collect());
        let bwd = run_direction(&self.bwd, seq, (0..steps).rev().collect());
        let h = self.hidden();
        let mut concat = Vec::with_capacity(2 * h);
        concat.extend_from_slice(fwd.last_h());
        concat.extend_from_slice(bwd.last_h());
        let logits: Vec<f64> = self
            .fc_w
            .rows()
            .into_iter()
            .zip(self.fc_b.iter())
            .map(|(row, b)| b + dot(row.as_slice().expect("standard layout"), &concat))
            .collect();
        let probs = softmax(&logits);
        Pass {
            fwd,
            bwd,
            concat,
            probs,
        }
    }

    /// Class probabilities for one sequence.
    pub fn forward(&self, seq: &FeatureSequence) -> Result<Vec<f64>, ModelError> {
        self.check(seq)?;
        Ok(self.run(seq).probs)
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict(&self, seq: &FeatureSequence) -> Result<usize, ModelError> {
        Ok(argmax(&self.forward(seq)?))
    }

    /// Loss and its exact gradient for one labeled sequence.
    pub fn backward(
        &self,
        seq: &FeatureSequence,
        label: usize,
    ) -> Result<(f64, Gradients), ModelError> {
        self.check(seq)?;
        if label >= self.classes() {
            return Err(ModelError::LabelOutOfRange {
                label,
                classes: self.classes(),
            });
        }
        let pass = self.run(seq);
        let loss_value = loss(&pass.probs, label);
        let mut grads = Gradients::zeros_like(self);
        if pass.probs[label] < PROB_FLOOR {
            // The clamped loss is flat here.
            return Ok((loss_value, grads));
        }

        let h = self.hidden();
        let mut dlogits = pass.probs.clone();
        dlogits[label] -= 1.0;

        let mut dconcat = vec![0.0; 2 * h];
        for (k, &dl) in dlogits.iter().enumerate() {
            grads.fc_b[k] = dl;
            let w_row = self.fc_w.row(k);
            let mut g_row = grads.fc_w.row_mut(k);
            for j in 0..2 * h {
                g_row[j] = dl * pass.concat[j];
                dconcat[j] += dl * w_row[j];
            }
        }

        backprop_direction(&self.fwd, seq, &pass.fwd, &dconcat[..h], &mut grads.fwd);
        backprop_direction(&self.bwd, seq, &pass.bwd, &dconcat[h..], &mut grads.bwd);
        Ok((loss_value, grads))
    }
}

/// Activations of one direction, kept for the backward pass.
struct DirectionCache {
    /// Row of the input sequence consumed at each step.
    order: Vec<usize>,
    hidden: usize,
    /// Activated gates, `steps x 4H`, blocks `[i, f, g, o]`.
    gates: Vec<f64>,
    /// Cell states, `steps x H`.
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    /// Hidden states, `steps x H`.
    h: Vec<f64>,
}

impl DirectionCache {
    fn last_h(&self) -> &[f64] {
        let n = self.h.len();
        &self.h[n - self.hidden..]
    }

    fn at<'a>(&self, v: &'a [f64], t: usize) -> &'a [f64] {
        &v[t * self.hidden..(t + 1) * self.hidden]
    }
}

struct Pass {
    fwd: DirectionCache,
    bwd: DirectionCache,
    concat: Vec<f64>,
    probs: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row `t` of a sequence as a contiguous slice when possible.
fn input_row<'a>(seq: &'a FeatureSequence, t: usize) -> ArrayView1<'a, f64> {
    seq.rows.row(t)
}

fn run_direction(
    p: &LstmDirectionParams,
    seq: &FeatureSequence,
    order: Vec<usize>,
) -> DirectionCache {
    let hidden = p.hidden();
    let steps = order.len();
    let w = p.w.as_slice().expect("standard layout");
    let u = p.u.as_slice().expect("standard layout");
    let f = p.features();
    let mut cache = DirectionCache {
        order,
        hidden,
        gates: vec![0.0; steps * 4 * hidden],
        c: vec![0.0; steps * hidden],
        tanh_c: vec![0.0; steps * hidden],
        h: vec![0.0; steps * hidden],
    };
    let zero = vec![0.0; hidden];
    let mut x_buf = vec![0.0; f];
    for t in 0..steps {
        let row = input_row(seq, cache.order[t]);
        let x: &[f64] = match row.as_slice() {
            Some(s) => s,
            None => {
                x_buf.iter_mut().zip(row.iter()).for_each(|(d, s)| *d = *s);
                &x_buf
            }
        };
        let (h_prev, c_prev) = if t == 0 {
            (zero.clone(), zero.clone())
        } else {
            (
                cache.at(&cache.h, t - 1).to_vec(),
                cache.at(&cache.c, t - 1).to_vec(),
            )
        };
        let gates = &mut cache.gates[t * 4 * hidden..(t + 1) * 4 * hidden];
        for (r, z) in gates.iter_mut().enumerate() {
            *z = p.b[r]
                + dot(&w[r * f..(r + 1) * f], x)
                + dot(&u[r * hidden..(r + 1) * hidden], &h_prev);
        }
        for j in 0..hidden {
            gates[j] = sigmoid(gates[j]);
            gates[hidden + j] = sigmoid(gates[hidden + j]);
            gates[2 * hidden + j] = gates[2 * hidden + j].tanh();
            gates[3 * hidden + j] = sigmoid(gates[3 * hidden + j]);
        }
        for j in 0..hidden {
            let (i, fg, g, o) = (
                gates[j],
                gates[hidden + j],
                gates[2 * hidden + j],
                gates[3 * hidden + j],
            );
            let c = fg * c_prev[j] + i * g;
            let tc = c.tanh();
            cache.c[t * hidden + j] = c;
            cache.tanh_c[t * hidden + j] = tc;
            cache.h[t * hidden + j] = o * tc;
        }
    }
    cache
}

fn backprop_direction(
    p: &LstmDirectionParams,
    seq: &FeatureSequence,
    cache: &DirectionCache,
    dh_last: &[f64],
    grads: &mut LstmDirectionParams,
) {
    let hidden = cache.hidden;
    let f = p.features();
    let steps = cache.order.len();
    let u = p.u.as_slice().expect("standard layout");
    let gw = grads.w.as_slice_mut().expect("standard layout");
    let gu = grads.u.as_slice_mut().expect("standard layout");
    let gb = grads.b.as_slice_mut().expect("standard layout");

    let mut dh = dh_last.to_vec();
    let mut dc = vec![0.0; hidden];
    let mut dz = vec![0.0; 4 * hidden];
    let zero = vec![0.0; hidden];
    for t in (0..steps).rev() {
        let gates = &cache.gates[t * 4 * hidden..(t + 1) * 4 * hidden];
        let tanh_c = cache.at(&cache.tanh_c, t);
        let (h_prev, c_prev) = if t == 0 {
            (&zero[..], &zero[..])
        } else {
            (cache.at(&cache.h, t - 1), cache.at(&cache.c, t - 1))
        };
        for j in 0..hidden {
            let (i, fg, g, o) = (
                gates[j],
                gates[hidden + j],
                gates[2 * hidden + j],
                gates[3 * hidden + j],
            );
            let d_o = dh[j] * tanh_c[j];
            dc[j] += dh[j] * o * (1.0 - tanh_c[j] * tanh_c[j]);
            dz[j] = dc[j] * g * i * (1.0 - i);
            dz[hidden + j] = dc[j] * c_prev[j] * fg * (1.0 - fg);
            dz[2 * hidden + j] = dc[j] * i * (1.0 - g * g);
            dz[3 * hidden + j] = d_o * o * (1.0 - o);
            dc[j] *= fg;
        }
        let x = input_row(seq, cache.order[t]);
        for r in 0..4 * hidden {
            let d = dz[r];
            gb[r] += d;
            if d == 0.0 {
                continue;
            }
            for (g, xv) in gw[r * f..(r + 1) * f].iter_mut().zip(x.iter()) {
                *g += d * xv;
            }
            for (g, hv) in gu[r * hidden..(r + 1) * hidden].iter_mut().zip(h_prev) {
                *g += d * hv;
            }
        }
        // dh_{t-1} = U^T dz
        for (k, v) in dh.iter_mut().enumerate() {
            *v = (0..4 * hidden).map(|r| u[r * hidden + k] * dz[r]).sum();
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of a probability vector against a class index.
pub fn loss(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn epsilon() -> f64 {
        1e-8
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            epsilon: defaults::epsilon(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "learning rate {} must be a finite nonnegative number",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon.is_nan()
            || self.epsilon <= 0.0
        {
            return Err(ModelError::InvalidConfig(
                "Adam moments out of range".into(),
            ));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(model: &BiLstmClassifier) -> Self {
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut BiLstmClassifier, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Returns the trained copy of `model` and the mean training loss of every
/// epoch. Batches are visited in a seed-determined
/// shuffled order and their gradients summed sequentially, so equal inputs
/// give bitwise-equal outputs.
pub fn train(
    model: &BiLstmClassifier,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(BiLstmClassifier, Vec<f64>), ModelError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if dataset.class_vocab != model.class_vocab {
        return Err(ModelError::VocabMismatch {
            model: model.class_vocab.clone(),
            dataset: dataset.class_vocab.clone(),
        });
    }
    for (seq, _) in &dataset.items {
        model.check(seq)?;
    }

    let mut model = model.clone();
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = Gradients::zeros_like(&model);
            for &idx in batch {
                let (seq, label) = &dataset.items[idx];
                let (l, g) = model.backward(seq, *label)?;
                epoch_loss += l;
                acc.add_assign(&g);
            }
            let scale = 1.0 / batch.len() as f64;
            for t in acc.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= scale);
            }
            adam.update(&mut model, &acc, cfg);
        }
        trace.push(epoch_loss / dataset.len() as f64);
    }
    Ok((model, trace))
}
