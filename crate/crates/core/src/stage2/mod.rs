//! Four-class stage-two classifier: an encoder feeding a dropout + softmax
//! head, trained with Adam and early stopping on a stratified holdout.
//!
//! The built-in encoder is a hashed token embedding trained end to end. An
//! external encoder can be used through the bridge, either frozen (the head is
//! trained here on bridge vectors) or fine-tuned inside the bridge.

pub mod adam;
pub mod encoder;
pub mod head;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeConfig, BridgeEncoder, FinetuneRequest};
use crate::corpus::Stage2Class;
use adam::{adam_step, AdamConfig, AdamState, SparseAdamState};
use encoder::{EmbeddingState, EncodeError, Encoder, HashedEmbedding};
use head::{argmax, ClassificationHead, HeadError, HeadMode, NUM_CLASSES};

pub use encoder::{DEFAULT_BUCKETS, DEFAULT_DIM};

pub const BUILTIN_LEARNING_RATE: f64 = 1e-3;
pub const EXTERNAL_LEARNING_RATE: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum Stage2Error {
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("class absent from fold: {0}")]
    ClassAbsent(Stage2Class),
    #[error("invalid stage-2 configuration: {0}")]
    Config(String),
    #[error("model uses an external encoder; a bridge connection is required")]
    NeedsBridge,
    #[error("invalid stage-2 model: {0}")]
    InvalidModel(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalMode {
    Frozen,
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    Builtin {
        #[serde(default = "default_buckets")]
        buckets: usize,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    External {
        #[serde(default)]
        bridge: BridgeConfig,
        mode: ExternalMode,
    },
}

fn default_buckets() -> usize {
    DEFAULT_BUCKETS
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Builtin { buckets: DEFAULT_BUCKETS, dim: DEFAULT_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub encoder: EncoderConfig,
    /// Defaults to 1e-3 for the built-in encoder and 1e-5 for an external one.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            learning_rate: None,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            holdout_fraction: 0.1,
            dropout: 0.3,
            seed: 42,
        }
    }
}

impl Stage2Config {
    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.encoder {
            EncoderConfig::Builtin { .. } => BUILTIN_LEARNING_RATE,
            EncoderConfig::External { .. } => EXTERNAL_LEARNING_RATE,
        })
    }

    pub fn validate(&self) -> Result<(), Stage2Error> {
        let lr = self.effective_learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Stage2Error::Config(format!("learning rate {lr} must be positive")));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Stage2Error::Config("batch size, max epochs and patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Stage2Error::Config(format!("holdout fraction {} must be in [0, 1)", self.holdout_fraction)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Stage2Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if let EncoderConfig::Builtin { buckets, dim } = self.encoder {
            if buckets == 0 || dim == 0 {
                return Err(Stage2Error::Config("embedding buckets and dim must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A labelled level-2 text.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Example {
    pub text: String,
    pub class: Stage2Class,
}

impl Stage2Example {
    pub fn new(text: impl Into<String>, class: Stage2Class) -> Self {
        Self { text: text.into(), class }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub holdout_loss: Option<f64>,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs_run: usize,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub seed: u64,
    pub learning_rate: f64,
    pub train_size: usize,
    pub holdout_size: usize,
    pub trace: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: Stage2Class,
    /// Softmax probabilities in [`Stage2Class::ORDER`].
    pub probabilities: [f64; NUM_CLASSES],
}

impl Prediction {
    pub fn from_probabilities(probabilities: [f64; NUM_CLASSES]) -> Self {
        let class = Stage2Class::from_index(argmax(&probabilities)).expect("four classes");
        Self { class, probabilities }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderState {
    Builtin { embedding: EmbeddingState },
    External { dim: usize, handle: Option<String>, model: Option<String> },
}

#[derive(Debug, Clone, PartialEq)]
enum EncoderRuntime {
    Builtin(HashedEmbedding),
    External { dim: usize, handle: Option<String>, model: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    class_order: Vec<Stage2Class>,
    encoder: EncoderState,
    head: ClassificationHead,
    metadata: TrainingMetadata,
}

/// Trained stage-two model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelFile", try_from = "ModelFile")]
pub struct Stage2Model {
    encoder: EncoderRuntime,
    head: ClassificationHead,
    metadata: TrainingMetadata,
}

impl From<Stage2Model> for ModelFile {
    fn from(m: Stage2Model) -> Self {
        let encoder = match m.encoder {
            EncoderRuntime::Builtin(e) => EncoderState::Builtin { embedding: e.to_state() },
            EncoderRuntime::External { dim, handle, model } => EncoderState::External { dim, handle, model },
        };
        ModelFile { class_order: Stage2Class::ORDER.to_vec(), encoder, head: m.head, metadata: m.metadata }
    }
}

impl TryFrom<ModelFile> for Stage2Model {
    type Error = String;

    fn try_from(f: ModelFile) -> Result<Self, String> {
        if f.class_order != Stage2Class::ORDER {
            return Err(format!("class order {:?} differs from the fixed order", f.class_order));
        }
        f.head.validate().map_err(|e| e.to_string())?;
        let encoder = match f.encoder {
            EncoderState::Builtin { embedding } => {
                let e = HashedEmbedding::from_state(embedding)?;
                if e.dim() != f.head.dim {
                    return Err("embedding and head dimensions differ".into());
                }
                EncoderRuntime::Builtin(e)
            }
            EncoderState::External { dim, handle, model } => {
                if dim != f.head.dim {
                    return Err("encoder and head dimensions differ".into());
                }
                EncoderRuntime::External { dim, handle, model }
            }
        };
        Ok(Stage2Model { encoder, head: f.head, metadata: f.metadata })
    }
}

impl Stage2Model {
    pub fn head(&self) -> &ClassificationHead {
        &self.head
    }

    pub fn metadata(&self) -> &TrainingMetadata {
        &self.metadata
    }

    pub fn is_builtin(&self) -> bool {
        matches!(self.encoder, EncoderRuntime::Builtin(_))
    }

    /// Handle of the fine-tuned encoder inside the bridge, if any.
    pub fn external_handle(&self) -> Option<&str> {
        match &self.encoder {
            EncoderRuntime::External { handle, .. } => handle.as_deref(),
            EncoderRuntime::Builtin(_) => None,
        }
    }

    pub fn predict_representation(&self, r: &[f64]) -> Result<Prediction, Stage2Error> {
        Ok(Prediction::from_probabilities(self.head.forward(r, HeadMode::Eval)?.probs))
    }

    /// Classify level-2 texts with the built-in encoder.
    pub fn classify_batch(&self, texts: &[&str]) -> Result<Vec<Prediction>, Stage2Error> {
        let EncoderRuntime::Builtin(emb) = &self.encoder else {
            return Err(Stage2Error::NeedsBridge);
        };
        texts.iter().map(|t| self.predict_representation(&emb.encode(t)?)).collect()
    }

    pub fn classify(&self, text: &str) -> Result<Prediction, Stage2Error> {
        Ok(self.classify_batch(&[text])?.remove(0))
    }

    /// Classify with an explicit encoder, e.g. a bridge bound to this model's
    /// handle.
    pub fn classify_with(&self, encoder: &dyn Encoder, texts: &[&str]) -> Result<Vec<Prediction>, Stage2Error> {
        if encoder.dim() != self.head.dim {
            return Err(Stage2Error::InvalidModel(format!(
                "encoder dimension {} differs from head dimension {}",
                encoder.dim(),
                self.head.dim
            )));
        }
        let reps = encoder.encode_batch(texts)?;
        reps.iter().map(|r| self.predict_representation(r)).collect()
    }

    /// Builtin models encode locally; external ones go through `bridge` using
    /// the model's own handle.
    pub fn classify_texts(&self, texts: &[&str], bridge: Option<&BridgeEncoder>) -> Result<Vec<Prediction>, Stage2Error> {
        match (&self.encoder, bridge) {
            (EncoderRuntime::Builtin(_), _) => self.classify_batch(texts),
            (EncoderRuntime::External { .. }, None) => Err(Stage2Error::NeedsBridge),
            (EncoderRuntime::External { dim, handle, .. }, Some(bridge)) => {
                let reps = bridge.encode_with(texts, handle.as_deref())?;
                if let Some(r) = reps.iter().find(|r| r.len() != *dim) {
                    return Err(EncodeError::Dimension { expected: *dim, got: r.len() }.into());
                }
                reps.iter().map(|r| self.predict_representation(r)).collect()
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, Stage2Error> {
        serde_json::from_str(s).map_err(|e| Stage2Error::InvalidModel(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), Stage2Error> {
        std::fs::write(path, self.to_json()).map_err(|e| Stage2Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, Stage2Error> {
        let s = std::fs::read_to_string(path).map_err(|e| Stage2Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

/// Stratified holdout: per class, a shuffled `round(fraction * n)` members
/// are held out, always leaving at least one for training.
pub fn holdout_split(classes: &[Stage2Class], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for class in Stage2Class::ORDER {
        let mut idx: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let h = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        hold.extend_from_slice(&idx[..h]);
        train.extend_from_slice(&idx[h..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    (train, hold)
}

enum Reps<'a> {
    Builtin { emb: &'a mut HashedEmbedding, ids: Vec<Vec<usize>> },
    Fixed(Vec<Vec<f64>>),
}

impl Reps<'_> {
    fn rep(&self, i: usize) -> Vec<f64> {
        match self {
            Reps::Builtin { emb, ids } => emb.encode_ids(&ids[i]),
            Reps::Fixed(v) => v[i].clone(),
        }
    }
}

fn evaluate(head: &ClassificationHead, reps: &Reps<'_>, idx: &[usize], y: &[usize]) -> Result<(f64, f64), Stage2Error> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for &i in idx {
        let out = head.forward(&reps.rep(i), HeadMode::Eval)?;
        loss -= out.probs[y[i]].ln();
        if argmax(&out.probs) == y[i] {
            correct += 1;
        }
    }
    let n = idx.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

fn fit_head(mut reps: Reps<'_>, y: &[usize], dim: usize, config: &Stage2Config) -> Result<(ClassificationHead, TrainingMetadata), Stage2Error> {
    config.validate()?;
    let classes: Vec<Stage2Class> = y.iter().map(|&k| Stage2Class::from_index(k).expect("class index")).collect();
    let (train_idx, hold_idx) = holdout_split(&classes, config.holdout_fraction, config.seed);
    let lr = config.effective_learning_rate();
    let adam = AdamConfig::new(lr);
    let mut head = ClassificationHead::new(dim, config.dropout, config.seed)?;
    let mut w_state = AdamState::new(head.weights.len());
    let mut b_state = AdamState::new(NUM_CLASSES);
    let mut emb_state = SparseAdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let mut trace = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best: Option<(ClassificationHead, Option<std::collections::HashMap<usize, Vec<f64>>>, usize)> = None;
    let mut bad_epochs = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch_reps: Vec<Vec<f64>> = chunk.iter().map(|&i| reps.rep(i)).collect();
            let batch: Vec<(&[f64], usize)> = batch_reps.iter().zip(chunk).map(|(r, &i)| (r.as_slice(), y[i])).collect();
            let g = head.loss_and_grad(&batch, HeadMode::Train { seed: rng.random() })?;
            adam_step(&mut head.weights, &g.d_weights, &mut w_state, &adam).expect("head shape");
            adam_step(&mut head.bias, &g.d_bias, &mut b_state, &adam).expect("bias shape");
            if let Reps::Builtin { emb, ids } = &mut reps {
                let mut grads = std::collections::HashMap::new();
                for (k, &i) in chunk.iter().enumerate() {
                    emb.accumulate_grad(&ids[i], &g.d_inputs[k], &mut grads);
                }
                emb_state.apply(&grads, *emb, &adam);
            }
        }
        let (train_loss, train_acc) = evaluate(&head, &reps, &train_idx, y)?;
        let (holdout_loss, holdout_acc) = if hold_idx.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(&head, &reps, &hold_idx, y)?;
            (Some(l), Some(a))
        };
        log::debug!("stage2 epoch {epoch}: train {train_loss:.4} holdout {holdout_loss:?}");
        trace.push(EpochMetrics {
            epoch,
            train_loss,
            train_accuracy: Some(train_acc),
            holdout_loss,
            holdout_accuracy: holdout_acc,
        });
        if let Some(hl) = holdout_loss {
            if hl < best_loss {
                best_loss = hl;
                bad_epochs = 0;
                let snap = match &reps {
                    Reps::Builtin { emb, .. } => Some(emb.snapshot()),
                    Reps::Fixed(_) => None,
                };
                best = Some((head.clone(), snap, epoch));
            } else {
                bad_epochs += 1;
                if bad_epochs >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let epochs_run = trace.len();
    let best_epoch = match best {
        Some((h, snap, epoch)) => {
            head = h;
            if let (Reps::Builtin { emb, .. }, Some(snap)) = (&mut reps, snap) {
                emb.restore(snap);
            }
            epoch
        }
        None => epochs_run,
    };
    let metadata = TrainingMetadata {
        epochs_run,
        best_epoch,
        stopped_early,
        seed: config.seed,
        learning_rate: lr,
        train_size: train_idx.len(),
        holdout_size: hold_idx.len(),
        trace,
    };
    Ok((head, metadata))
}

fn labels(examples: &[Stage2Example]) -> Result<Vec<usize>, Stage2Error> {
    if examples.is_empty() {
        return Err(Stage2Error::EmptyTrainingSet);
    }
    if let Some(c) = Stage2Class::ORDER.into_iter().find(|c| examples.iter().all(|e| e.class != *c)) {
        return Err(Stage2Error::ClassAbsent(c));
    }
    Ok(examples.iter().map(|e| e.class.index()).collect())
}

/// Train with the built-in hashed embedding.
pub fn train(examples: &[Stage2Example], config: &Stage2Config) -> Result<Stage2Model, Stage2Error> {
    let EncoderConfig::Builtin { buckets, dim } = config.encoder else {
        return Err(Stage2Error::NeedsBridge);
    };
    config.validate()?;
    let y = labels(examples)?;
    let mut emb = HashedEmbedding::new(buckets, dim, config.seed);
    let ids = examples.iter().map(|e| emb.bucket_ids(&e.text)).collect();
    let (head, metadata) = fit_head(Reps::Builtin { emb: &mut emb, ids }, &y, dim, config)?;
    Ok(Stage2Model { encoder: EncoderRuntime::Builtin(emb), head, metadata })
}

/// Train against an external encoder reached through the bridge.
pub fn train_with_bridge(examples: &[Stage2Example], config: &Stage2Config, bridge: &BridgeEncoder) -> Result<Stage2Model, Stage2Error> {
    let EncoderConfig::External { mode, .. } = &config.encoder else {
        return train(examples, config);
    };
    config.validate()?;
    let y = labels(examples)?;
    let dim = bridge.dim();
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    match mode {
        ExternalMode::Frozen => {
            let reps = bridge.encode_batch(&texts)?;
            let (head, metadata) = fit_head(Reps::Fixed(reps), &y, dim, config)?;
            Ok(Stage2Model { encoder: EncoderRuntime::External { dim, handle: None, model: None }, head, metadata })
        }
        ExternalMode::FineTune => {
            let request = FinetuneRequest {
                texts: texts.iter().map(|t| t.to_string()).collect(),
                labels: examples.iter().map(|e| e.class.as_str().to_string()).collect(),
                epochs: config.max_epochs,
                learning_rate: config.effective_learning_rate(),
                batch_size: config.batch_size,
                dropout: config.dropout,
                seed: config.seed,
                holdout_fraction: config.holdout_fraction,
                patience: config.patience,
            };
            let mut trace = Vec::new();
            let resp = bridge
                .finetune(&request, |p| {
                    trace.push(EpochMetrics {
                        epoch: p.epoch,
                        train_loss: p.train_loss,
                        train_accuracy: None,
                        holdout_loss: p.holdout_loss,
                        holdout_accuracy: None,
                    })
                })
                .map_err(EncodeError::from)?;
            let epochs_run = resp.epochs_run.unwrap_or(trace.len());
            let metadata = TrainingMetadata {
                epochs_run,
                best_epoch: resp.best_epoch.unwrap_or(epochs_run),
                stopped_early: epochs_run < config.max_epochs,
                seed: config.seed,
                learning_rate: config.effective_learning_rate(),
                train_size: examples.len(),
                holdout_size: 0,
                trace,
            };
            Ok(Stage2Model {
                encoder: EncoderRuntime::External { dim, handle: Some(resp.handle), model: None },
                head: resp.head,
                metadata,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 40 examples, 10 per class, each class with its own vocabulary.
    pub(crate) fn separable() -> Vec<Stage2Example> {
        let words = [
            ["isolation", "valve", "shut", "letdown"],
            ["breaker", "bus", "power", "diesel"],
            ["offsite", "grid", "switchyard", "transmission"],
            ["surveillance", "paperwork", "procedure", "training"],
        ];
        let mut out = Vec::new();
        for (k, ws) in words.iter().enumerate() {
            for j in 0..10 {
                let text = format!("{} {} {}", ws[j % 4], ws[(j + 1) % 4], ws[(j + 2) % 4]);
                out.push(Stage2Example::new(text, Stage2Class::from_index(k).unwrap()));
            }
        }
        out
    }

    fn accuracy(model: &Stage2Model, data: &[Stage2Example]) -> f64 {
        let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
        let preds = model.classify_batch(&texts).unwrap();
        preds.iter().zip(data).filter(|(p, e)| p.class == e.class).count() as f64 / data.len() as f64
    }

    #[test]
    fn learns_a_separable_fixture() {
        let data = separable();
        let config = Stage2Config { learning_rate: Some(0.05), holdout_fraction: 0.0, max_epochs: 40, ..Default::default() };
        let model = train(&data, &config).unwrap();
        assert_eq!(accuracy(&model, &data), 1.0);
        let trace = &model.metadata().trace;
        assert!(trace.last().unwrap().train_loss < trace[0].train_loss);
    }

    #[test]
    fn early_stops_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Stage2Example> = (0..120)
            .map(|_| {
                let text = (0..6).map(|_| format!("w{}", rng.random_range(0..400))).collect::<Vec<_>>().join(" ");
                Stage2Example::new(text, Stage2Class::from_index(rng.random_range(0..4)).unwrap())
            })
            .collect();
        let config = Stage2Config { learning_rate: Some(0.05), ..Default::default() };
        let model = train(&data, &config).unwrap();
        let md = model.metadata();
        assert!(md.stopped_early, "ran {} epochs", md.epochs_run);
        assert!(md.epochs_run < 50);
        assert_eq!(md.epochs_run, md.best_epoch + config.patience);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable();
        let config = Stage2Config { max_epochs: 3, ..Default::default() };
        assert_eq!(train(&data, &config).unwrap(), train(&data, &config).unwrap());
    }

    #[test]
    fn persistence_round_trip() {
        let data = separable();
        let model = train(&data, &Stage2Config { max_epochs: 2, ..Default::default() }).unwrap();
        let back = Stage2Model::from_json(&model.to_json()).unwrap();
        let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(model.classify_batch(&texts).unwrap(), back.classify_batch(&texts).unwrap());
    }

    #[test]
    fn rejects_reordered_classes() {
        let model = train(&separable(), &Stage2Config { max_epochs: 1, ..Default::default() }).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&model.to_json()).unwrap();
        v["class_order"] = serde_json::json!(["LOAC", "ISOL_FLOW", "LOOP", "NON_SDIE"]);
        assert!(Stage2Model::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn holdout_is_stratified_and_disjoint() {
        let classes: Vec<Stage2Class> =
            [(0, 27), (1, 89), (2, 54), (3, 314)].iter().flat_map(|&(k, n)| vec![Stage2Class::from_index(k).unwrap(); n]).collect();
        let (train_idx, hold) = holdout_split(&classes, 0.1, 9);
        assert_eq!(train_idx.len() + hold.len(), classes.len());
        let count = |k| hold.iter().filter(|&&i| classes[i].index() == k).count();
        assert_eq!([count(0), count(1), count(2), count(3)], [3, 9, 5, 31]);
        let (t, h) = holdout_split(&[Stage2Class::Loac], 0.5, 1);
        assert_eq!((t.len(), h.len()), (1, 0));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let head = ClassificationHead::new(4, 0.0, 5).unwrap();
        let emb = HashedEmbedding::new(64, 4, 2);
        let ids = emb.bucket_ids("pump pump valve");
        let loss = |e: &HashedEmbedding| head.loss_and_grad(&[(&e.encode_ids(&ids), 1)], HeadMode::Eval).unwrap().loss;
        let g = head.loss_and_grad(&[(&emb.encode_ids(&ids), 1)], HeadMode::Eval).unwrap();
        let mut grads = std::collections::HashMap::new();
        emb.accumulate_grad(&ids, &g.d_inputs[0], &mut grads);
        use adam::RowTable;
        for (&id, grad) in &grads {
            for j in 0..4 {
                let (mut p, mut m) = (emb.clone(), emb.clone());
                p.row_mut(id)[j] += 1e-6;
                m.row_mut(id)[j] -= 1e-6;
                let fd = (loss(&p) - loss(&m)) / 2e-6;
                assert!((fd - grad[j]).abs() < 1e-7, "{fd} vs {}", grad[j]);
            }
        }
    }

    #[test]
    fn missing_class_is_rejected() {
        let data: Vec<_> = separable().into_iter().filter(|e| e.class != Stage2Class::Loop).collect();
        let err = train(&data, &Stage2Config::default()).unwrap_err();
        assert_eq!(err.to_string(), "class absent from fold: LOOP");
        assert!(matches!(train(&[], &Stage2Config::default()), Err(Stage2Error::EmptyTrainingSet)));
    }

    #[test]
    fn external_model_needs_a_bridge() {
        let config = Stage2Config { encoder: EncoderConfig::External { bridge: BridgeConfig::default(), mode: ExternalMode::Frozen }, ..Default::default() };
        assert!(matches!(train(&separable(), &config), Err(Stage2Error::NeedsBridge)));
        assert_eq!(config.effective_learning_rate(), EXTERNAL_LEARNING_RATE);
    }
}
