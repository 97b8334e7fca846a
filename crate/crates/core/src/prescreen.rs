//! Stage one: class-weighted, L2-regularized logistic regression over pattern
//! counts, trained with shuffled mini-batch SGD.
//!
//! Objective over samples `(x_i, y_i)`:
//!
//! ```text
//! L(w, b) = sum_i c[y_i] * (-y_i ln p_i - (1 - y_i) ln(1 - p_i)) + alpha * |w|^2
//! p_i     = sigmoid(w . x_i + b)
//! ```
//!
//! `c[0]` and `c[1]` are the non-SDIE and SDIE class weights; the bias is not
//! regularized.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::patterns::{FeatureVector, PatternVocabulary};

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrescreenHyperparams {
    /// L2 coefficient on the weights.
    pub alpha: f64,
    pub class_weight_non_sdie: f64,
    pub class_weight_sdie: f64,
    /// Step size applied to the summed mini-batch gradient. With raw counts the
    /// update stays stable while
    /// `learning_rate * batch_size * max(c) * max|x|^2 / 4 < 2`; the defaults
    /// satisfy this for count vectors with squared norm up to about 160.
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PrescreenHyperparams {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            class_weight_non_sdie: 0.019,
            class_weight_sdie: 0.981,
            learning_rate: 0.05,
            epochs: 300,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl PrescreenHyperparams {
    fn class_weight(&self, y: u8) -> f64 {
        if y == 1 {
            self.class_weight_sdie
        } else {
            self.class_weight_non_sdie
        }
    }

    fn validate(&self) -> Result<(), PrescreenError> {
        let bad = |what: &str| Err(PrescreenError::InvalidHyperparams(what.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.class_weight_sdie >= 0.0 && self.class_weight_non_sdie >= 0.0) {
            return bad("class weights must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PrescreenError {
    #[error("feature dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("degenerate training set: need at least one sample of each class")]
    DegenerateTrainingSet,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescreenModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub threshold: f64,
    pub hyperparams: PrescreenHyperparams,
    pub vocabulary_version: String,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl PrescreenModel {
    pub fn zeros(dim: usize, hyperparams: PrescreenHyperparams, vocabulary_version: impl Into<String>) -> Self {
        Self { w: vec![0.0; dim], b: 0.0, threshold: 0.5, hyperparams, vocabulary_version: vocabulary_version.into() }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self, PrescreenError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(PrescreenError::InvalidThreshold(threshold));
        }
        self.threshold = threshold;
        Ok(self)
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), PrescreenError> {
        if x.len() != self.w.len() {
            return Err(PrescreenError::DimensionMismatch { expected: self.w.len(), got: x.len() });
        }
        Ok(())
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b
    }

    /// `sigmoid(w . x + b)`.
    pub fn predict_probability(&self, x: &[f64]) -> Result<f64, PrescreenError> {
        self.check_dim(x)?;
        Ok(sigmoid(self.logit(x)))
    }

    /// Suspected SDIE when `p >= threshold`.
    pub fn decide(&self, x: &[f64]) -> Result<bool, PrescreenError> {
        Ok(self.predict_probability(x)? >= self.threshold)
    }

    fn check_batch(&self, xs: &[Vec<f64>], ys: &[u8]) -> Result<(), PrescreenError> {
        if xs.len() != ys.len() {
            return Err(PrescreenError::LengthMismatch { features: xs.len(), labels: ys.len() });
        }
        for x in xs {
            self.check_dim(x)?;
        }
        if let Some(&y) = ys.iter().find(|&&y| y > 1) {
            return Err(PrescreenError::InvalidLabel(y));
        }
        Ok(())
    }

    fn sample_loss(&self, x: &[f64], y: u8) -> f64 {
        let p = sigmoid(self.logit(x)).clamp(PROB_EPS, 1.0 - PROB_EPS);
        let ce = if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
        self.hyperparams.class_weight(y) * ce
    }

    fn penalty(&self) -> f64 {
        self.hyperparams.alpha * self.w.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weighted cross-entropy summed over the batch plus `alpha * |w|^2`.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[u8]) -> Result<f64, PrescreenError> {
        self.check_batch(xs, ys)?;
        Ok(xs.iter().zip(ys).map(|(x, &y)| self.sample_loss(x, y)).sum::<f64>() + self.penalty())
    }

    /// Analytic gradient of [`loss`](Self::loss):
    /// `dL/dw = sum c[y](p - y) x + 2 alpha w`, `dL/db = sum c[y](p - y)`.
    pub fn gradient(&self, xs: &[Vec<f64>], ys: &[u8]) -> Result<(Vec<f64>, f64), PrescreenError> {
        self.check_batch(xs, ys)?;
        let mut gw = vec![0.0; self.w.len()];
        let gb = self.accumulate(xs.iter().zip(ys.iter().copied()), &mut gw);
        for (g, w) in gw.iter_mut().zip(&self.w) {
            *g += 2.0 * self.hyperparams.alpha * w;
        }
        Ok((gw, gb))
    }

    /// Adds the data term of the gradient into `gw` and returns the bias part.
    fn accumulate<'a, I>(&self, batch: I, gw: &mut [f64]) -> f64
    where
        I: IntoIterator<Item = (&'a Vec<f64>, u8)>,
    {
        let mut gb = 0.0;
        for (x, y) in batch {
            let r = self.hyperparams.class_weight(y) * (sigmoid(self.logit(x)) - f64::from(y));
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += r * xi;
            }
            gb += r;
        }
        gb
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PrescreenModel,
    /// Full objective divided by the sample count, after each epoch.
    pub loss_trace: Vec<f64>,
}

/// Train from zero weights. Each epoch shuffles the samples under the seed and
/// steps on every mini-batch; a batch carries its share `|B|/n` of the L2 term
/// so one epoch's steps sum to the full objective.
pub fn train(
    xs: &[Vec<f64>],
    ys: &[u8],
    hyperparams: &PrescreenHyperparams,
    vocabulary_version: &str,
) -> Result<TrainOutcome, PrescreenError> {
    train_with_observer(xs, ys, hyperparams, vocabulary_version, |_, _| {})
}

/// As [`train`], calling `observe(epoch, model)` after every epoch.
pub fn train_with_observer<F>(
    xs: &[Vec<f64>],
    ys: &[u8],
    hyperparams: &PrescreenHyperparams,
    vocabulary_version: &str,
    mut observe: F,
) -> Result<TrainOutcome, PrescreenError>
where
    F: FnMut(usize, &PrescreenModel),
{
    hyperparams.validate()?;
    let dim = xs.first().map_or(0, Vec::len);
    let mut model = PrescreenModel::zeros(dim, hyperparams.clone(), vocabulary_version);
    model.check_batch(xs, ys)?;
    if !(ys.contains(&0) && ys.contains(&1)) {
        return Err(PrescreenError::DegenerateTrainingSet);
    }

    let n = xs.len() as f64;
    let lr = hyperparams.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(hyperparams.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut gw = vec![0.0; dim];
    let mut loss_trace = Vec::with_capacity(hyperparams.epochs);

    for epoch in 0..hyperparams.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyperparams.batch_size) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let gb = model.accumulate(batch.iter().map(|&i| (&xs[i], ys[i])), &mut gw);
            let reg = 2.0 * hyperparams.alpha * batch.len() as f64 / n;
            for (w, g) in model.w.iter_mut().zip(&gw) {
                *w -= lr * (g + reg * *w);
            }
            model.b -= lr * gb;
        }
        loss_trace.push(model.loss(xs, ys)? / n);
        observe(epoch, &model);
    }
    Ok(TrainOutcome { model, loss_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescreenResult {
    pub probabilities: Vec<f64>,
    pub decisions: Vec<bool>,
    /// Indices predicted as possible SDIEs.
    pub suspected: Vec<usize>,
    /// Indices screened out as non-SDIEs.
    pub excluded: Vec<usize>,
}

impl PrescreenResult {
    pub fn exclusion_rate(&self) -> f64 {
        let n = self.decisions.len();
        if n == 0 {
            0.0
        } else {
            self.excluded.len() as f64 / n as f64
        }
    }
}

pub fn prescreen_vectors(model: &PrescreenModel, xs: &[Vec<f64>]) -> Result<PrescreenResult, PrescreenError> {
    let mut result = PrescreenResult {
        probabilities: Vec::with_capacity(xs.len()),
        decisions: Vec::with_capacity(xs.len()),
        suspected: Vec::new(),
        excluded: Vec::new(),
    };
    for (i, x) in xs.iter().enumerate() {
        let p = model.predict_probability(x)?;
        let keep = p >= model.threshold;
        result.probabilities.push(p);
        result.decisions.push(keep);
        if keep {
            result.suspected.push(i);
        } else {
            result.excluded.push(i);
        }
    }
    Ok(result)
}

/// Vectorize each event's level-1 text and partition the corpus.
pub fn prescreen(model: &PrescreenModel, corpus: &Corpus, vocab: &PatternVocabulary) -> Result<PrescreenResult, PrescreenError> {
    let xs: Vec<Vec<f64>> = corpus.iter().map(|e| vocab.vectorize(&e.level1_text).to_f64()).collect();
    prescreen_vectors(model, &xs)
}

/// Feature rows and binary SDIE labels for labeled events; unlabeled events
/// are skipped.
pub fn design_matrix(corpus: &Corpus, vocab: &PatternVocabulary) -> (Vec<Vec<f64>>, Vec<u8>) {
    corpus
        .iter()
        .filter(|e| e.raw_label.is_labeled())
        .map(|e| (vocab.vectorize(&e.level1_text).to_f64(), u8::from(e.raw_label.is_sdie())))
        .unzip()
}

pub fn to_rows(vectors: &[FeatureVector]) -> Vec<Vec<f64>> {
    vectors.iter().map(FeatureVector::to_f64).collect()
}
