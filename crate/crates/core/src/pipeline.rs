//! End-to-end run: ingest, prescreen, refined stage-two dataset, stage-two
//! evaluation, and the artifacts each step leaves in the output directory.
//!
//! While a run is in progress the output directory holds a
//! [`INCOMPLETE_MARKER`] file. It is removed only after every artifact has
//! been written; a failed run leaves it in place with the error appended.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bridge::{BridgeClient, BridgeEncoder};
use crate::corpus::{
    ingest_events, map_stage2_label, split_train_test, Corpus, EventRecord, InputFormat, RawLabel, RowError,
    Stage2Class, Stage2Target,
};
use crate::eval::{
    confusion, crossval, metrics, render_report, ConfusionMatrix, EvalReport, FoldOptions, ReportStyle, NON_SDIE,
    SDIE,
};
use crate::patterns::{distribution_by_group, load_vocabulary, PatternVocabulary};
use crate::prescreen::{self, design_matrix, PrescreenHyperparams};
use crate::stage2::{self, holdout_split, EncoderConfig, Prediction, Stage2Config, Stage2Example, Stage2Model};
use crate::text::Cleaner;

pub const INCOMPLETE_MARKER: &str = "RUN_INCOMPLETE";

pub const PRESCREEN_MODEL_FILE: &str = "prescreen_model.json";
pub const PRESCREEN_REPORT_FILE: &str = "prescreen_report.txt";
pub const PRESCREEN_REPORT_JSON: &str = "prescreen_report.json";
pub const REFINED_FILE: &str = "refined.jsonl";
pub const STAGE2_MODEL_FILE: &str = "stage2_model.json";
pub const STAGE2_REPORT_FILE: &str = "stage2_report.txt";
pub const STAGE2_REPORT_JSON: &str = "stage2_report.json";
pub const REVIEW_QUEUE_FILE: &str = "review_queue.json";
pub const DISTRIBUTION_FILE: &str = "pattern_distribution.json";
pub const INGEST_ERRORS_FILE: &str = "ingest_errors.json";
pub const SUMMARY_FILE: &str = "run_summary.json";

/// Which side(s) of the prescreen split feed stage two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSplit {
    Train,
    Test,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage2Evaluation {
    CrossValidation { folds: usize, stratified: bool, parallel: bool },
    TrainTest { train_fraction: f64 },
}

impl Default for Stage2Evaluation {
    fn default() -> Self {
        Stage2Evaluation::CrossValidation { folds: 5, stratified: true, parallel: true }
    }
}

/// Run configuration. Relative paths are resolved against the directory of the
/// config file. `seed` drives the split, the folds and both trainers,
/// replacing the seeds inside `prescreen` and `stage2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    /// Inferred from the corpus extension when absent.
    pub corpus_format: Option<InputFormat>,
    /// Built-in vocabulary when absent.
    pub vocabulary: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub strip_list: Option<Vec<String>>,
    pub seed: u64,
    pub train_fraction: f64,
    pub prescreen: PrescreenHyperparams,
    pub threshold: f64,
    pub stage2_source: SourceSplit,
    pub stage2: Stage2Config,
    pub stage2_evaluation: Stage2Evaluation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::new(),
            corpus_format: None,
            vocabulary: None,
            output_dir: PathBuf::from("run"),
            strip_list: None,
            seed: 42,
            train_fraction: 0.7,
            prescreen: PrescreenHyperparams::default(),
            threshold: 0.5,
            stage2_source: SourceSplit::Both,
            stage2: Stage2Config::default(),
            stage2_evaluation: Stage2Evaluation::default(),
        }
    }
}

/// Pipeline step, named in errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Vectorize,
    Prescreen,
    Refine,
    Stage2,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Vectorize => "vectorize",
            Stage::Prescreen => "prescreen",
            Stage::Refine => "refine",
            Stage::Stage2 => "stage2",
            Stage::Report => "report",
        })
    }
}

/// Bad input versus a fault in the run itself (I/O, bridge, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Data,
    Internal,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    pub fn data(stage: Stage, message: impl fmt::Display) -> Self {
        Self { stage, kind: FailureKind::Data, message: message.to_string() }
    }

    pub fn internal(stage: Stage, message: impl fmt::Display) -> Self {
        Self { stage, kind: FailureKind::Internal, message: message.to_string() }
    }
}

impl PipelineConfig {
    /// Parse a config document; relative paths resolve against `base_dir`.
    pub fn from_json(document: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut config: PipelineConfig =
            serde_json::from_str(document).map_err(|e| PipelineError::data(Stage::Config, e))?;
        config.resolve_paths(base_dir);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let document = fs::read_to_string(path)
            .map_err(|e| PipelineError::data(Stage::Config, format!("{}: {e}", path.display())))?;
        Self::from_json(&document, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve_paths(&mut self, base_dir: &Path) {
        let resolve = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut self.corpus);
        resolve(&mut self.output_dir);
        if let Some(v) = self.vocabulary.as_mut() {
            resolve(v);
        }
    }

    /// Hex SHA-256 of the config with `output_dir` cleared, so the same run
    /// written to two places hashes identically.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn corpus_format(&self) -> InputFormat {
        self.corpus_format.unwrap_or_else(|| format_for_path(&self.corpus))
    }

    pub fn cleaner(&self) -> Cleaner {
        match &self.strip_list {
            Some(list) => Cleaner::new(list),
            None => Cleaner::default(),
        }
    }

    pub fn prescreen_hyperparams(&self) -> PrescreenHyperparams {
        PrescreenHyperparams { seed: self.seed, ..self.prescreen.clone() }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config { seed: self.seed, ..self.stage2.clone() }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::data(Stage::Config, m));
        if self.corpus.as_os_str().is_empty() {
            return err("no corpus path given".into());
        }
        if !self.corpus.is_file() {
            return err(format!("corpus {} does not exist", self.corpus.display()));
        }
        if let Some(v) = &self.vocabulary {
            if !v.is_file() {
                return err(format!("vocabulary {} does not exist", v.display()));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return err("no output directory given".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return err(format!("train_fraction must lie strictly between 0 and 1, got {}", self.train_fraction));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return err(format!("threshold must lie strictly between 0 and 1, got {}", self.threshold));
        }
        match self.stage2_evaluation {
            Stage2Evaluation::CrossValidation { folds, .. } if folds < 2 => {
                return err(format!("cross-validation needs at least 2 folds, got {folds}"));
            }
            Stage2Evaluation::TrainTest { train_fraction } if !(train_fraction > 0.0 && train_fraction < 1.0) => {
                return err(format!("stage-2 train_fraction must lie strictly between 0 and 1, got {train_fraction}"));
            }
            _ => {}
        }
        self.stage2.validate().map_err(|e| PipelineError::data(Stage::Config, e))
    }
}

/// `.csv` reads as CSV, everything else as JSONL.
pub fn format_for_path(path: &Path) -> InputFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
        _ => InputFormat::Jsonl,
    }
}

/// Stamped into every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub vocabulary_version: String,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64, vocabulary_version: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            vocabulary_version: vocabulary_version.into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn header(&self) -> String {
        format!(
            "config_hash: {}\nseed: {}\nvocabulary_version: {}\ntool_version: {}\n",
            self.config_hash, self.seed, self.vocabulary_version, self.tool_version
        )
    }
}

/// A JSON artifact: the body's fields plus an optional `provenance` object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(flatten)]
    pub body: T,
}

fn stamp<T>(provenance: &Provenance, body: T) -> Artifact<T> {
    Artifact { provenance: Some(provenance.clone()), body }
}

impl<T: Serialize> Artifact<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact serializes")
    }
}

/// Read a model or report written with or without provenance.
pub fn read_artifact<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Artifact<T>, String> {
    let s = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&s).map_err(|e| format!("{}: {e}", path.display()))
}

/// Where a corpus came from; lets the review service check that a queue
/// belongs to a project.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRef {
    pub path: String,
    pub sha256: String,
    pub events: usize,
}

impl CorpusRef {
    pub fn of_file(path: &Path, events: usize) -> std::io::Result<Self> {
        Ok(Self { path: path.display().to_string(), sha256: file_sha256(path)?, events })
    }
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSide {
    Train,
    Test,
}

/// A prescreen-positive event admitted to stage two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedEvent {
    /// Index into the full corpus.
    pub index: usize,
    pub class: Stage2Class,
    pub prescreen_probability: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinedSet {
    pub events: Vec<RefinedEvent>,
    /// Prescreen-positive LOCA/SFP events left out of stage two.
    pub excluded_types_dropped: usize,
    /// SDIEs among the eligible events that the prescreen screened out.
    pub sdie_missed: usize,
}

/// Stage-two dataset: every prescreen-positive event among `eligible`
/// (indices into `corpus`), with LOCA/SFP dropped and ISOL/FLOW merged.
/// Unlabeled events are rejected.
pub fn build_refined(
    corpus: &Corpus,
    eligible: &[usize],
    probabilities: &[f64],
    decisions: &[bool],
) -> Result<RefinedSet, String> {
    let mut set = RefinedSet::default();
    let mut seen = vec![false; corpus.len()];
    for &i in eligible {
        if std::mem::replace(&mut seen[i], true) {
            return Err(format!("event index {i} listed twice"));
        }
        let event = &corpus.events()[i];
        if !decisions[i] {
            set.sdie_missed += usize::from(event.raw_label.is_sdie());
            continue;
        }
        match map_stage2_label(event.raw_label).map_err(|e| format!("event {}: {e}", event.id))? {
            Stage2Target::Class(class) => {
                set.events.push(RefinedEvent { index: i, class, prescreen_probability: probabilities[i] })
            }
            Stage2Target::Excluded => set.excluded_types_dropped += 1,
        }
    }
    Ok(set)
}

/// SDIE share of the labeled events before and after prescreening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBalance {
    pub events_before: usize,
    pub sdie_before: usize,
    pub sdie_share_before: f64,
    pub events_after: usize,
    pub sdie_after: usize,
    pub sdie_share_after: f64,
}

impl StageBalance {
    pub fn new(events_before: usize, sdie_before: usize, events_after: usize, sdie_after: usize) -> Self {
        let share = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
        Self {
            events_before,
            sdie_before,
            sdie_share_before: share(sdie_before, events_before),
            events_after,
            sdie_after,
            sdie_share_after: share(sdie_after, events_after),
        }
    }

    pub fn render(&self) -> String {
        format!(
            "SDIE share before prescreening: {:.2}% ({} of {})\nSDIE share after prescreening: {:.2}% ({} of {})\n",
            self.sdie_share_before * 100.0,
            crate::eval::thousands(self.sdie_before as u64),
            crate::eval::thousands(self.events_before as u64),
            self.sdie_share_after * 100.0,
            crate::eval::thousands(self.sdie_after as u64),
            crate::eval::thousands(self.events_after as u64),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSpan {
    pub pattern: usize,
    pub category: String,
    pub phrase: String,
    /// Byte offsets into the item's `text`.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuePrediction {
    pub class: Stage2Class,
    /// In [`Stage2Class::ORDER`].
    pub probabilities: [f64; 4],
}

impl From<&Prediction> for QueuePrediction {
    fn from(p: &Prediction) -> Self {
        Self { class: p.class, probabilities: p.probabilities }
    }
}

/// One prescreen-positive event awaiting analyst review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub event_id: String,
    /// Level-1 text; span offsets refer to it.
    pub text: String,
    pub raw_text: String,
    pub raw_label: RawLabel,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub date: Option<String>,
    pub prescreen_probability: f64,
    pub prediction: QueuePrediction,
    pub spans: Vec<QueueSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueue {
    pub corpus: CorpusRef,
    pub items: Vec<QueueItem>,
}

pub fn queue_item(event: &EventRecord, vocab: &PatternVocabulary, probability: f64, prediction: &Prediction) -> QueueItem {
    let spans = vocab
        .match_spans(&event.level1_text)
        .into_iter()
        .map(|s| QueueSpan {
            pattern: s.pattern,
            category: vocab.category_of(s.pattern).map(|c| c.to_string()).unwrap_or_default(),
            phrase: s.phrase,
            start: s.start_byte,
            end: s.end_byte,
        })
        .collect();
    QueueItem {
        event_id: event.id.clone(),
        text: event.level1_text.clone(),
        raw_text: event.raw_text.clone(),
        raw_label: event.raw_label,
        source: event.source.clone(),
        date: event.event_date.map(|d| d.format("%Y-%m-%d").to_string()),
        prescreen_probability: probability,
        prediction: prediction.into(),
        spans,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescreenReport {
    pub train: EvalReport,
    pub test: EvalReport,
    pub train_matrix: ConfusionMatrix,
    pub test_matrix: ConfusionMatrix,
    /// Share of actual non-SDIEs the prescreen screened out, per split.
    pub train_exclusion_rate: f64,
    pub test_exclusion_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub test_size: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub evaluation: Stage2Evaluation,
    pub report: EvalReport,
    pub matrix: ConfusionMatrix,
    pub folds: Vec<FoldSummary>,
    pub stage_balance: StageBalance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub corpus: CorpusRef,
    pub ingest_row_errors: usize,
    pub train_events: usize,
    pub test_events: usize,
    pub stage2_source: SourceSplit,
    pub refined_events: usize,
    pub excluded_types_dropped: usize,
    pub sdie_missed: usize,
    pub prescreen_test_accuracy: f64,
    pub prescreen_test_exclusion_rate: f64,
    pub stage2_accuracy: f64,
    pub stage_balance: StageBalance,
    pub artifacts: Vec<String>,
}

/// Non-SDIE share of actual non-SDIEs predicted negative.
fn exclusion_rate(cm: &ConfusionMatrix) -> f64 {
    let actual_non = cm.actual_total(1);
    if actual_non == 0 {
        0.0
    } else {
        cm.get(1, 1) as f64 / actual_non as f64
    }
}

fn binary_matrix(events: &[&EventRecord], decisions: &[bool]) -> ConfusionMatrix {
    let truths: Vec<&str> = events.iter().map(|e| if e.raw_label.is_sdie() { SDIE } else { NON_SDIE }).collect();
    let preds: Vec<&str> = decisions.iter().map(|&d| if d { SDIE } else { NON_SDIE }).collect();
    confusion(&truths, &preds, &[SDIE, NON_SDIE]).expect("binary labels")
}

struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    fn create(root: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root).map_err(|e| PipelineError::internal(Stage::Report, format!("{}: {e}", root.display())))?;
        let out = Self { root: root.to_path_buf(), written: Vec::new() };
        fs::write(out.root.join(INCOMPLETE_MARKER), "run in progress\n")
            .map_err(|e| PipelineError::internal(Stage::Report, e))?;
        Ok(out)
    }

    fn write(&mut self, stage: Stage, name: &str, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
        let path = self.root.join(name);
        fs::write(&path, contents).map_err(|e| PipelineError::internal(stage, format!("{}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn fail(&self, err: &PipelineError) {
        if let Ok(mut f) = fs::OpenOptions::new().append(true).create(true).open(self.root.join(INCOMPLETE_MARKER)) {
            let _ = writeln!(f, "{err}");
        }
    }

    fn finish(&self) -> Result<(), PipelineError> {
        fs::remove_file(self.root.join(INCOMPLETE_MARKER)).map_err(|e| PipelineError::internal(Stage::Report, e))
    }
}

pub fn load_vocab(path: Option<&Path>) -> Result<PatternVocabulary, String> {
    match path {
        None => Ok(PatternVocabulary::default_sdie()),
        Some(p) => {
            let doc = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            load_vocabulary(&doc).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

/// Spawn the bridge when the stage-two encoder is external.
pub fn connect_bridge(config: &Stage2Config) -> Result<Option<BridgeEncoder>, String> {
    match &config.encoder {
        EncoderConfig::Builtin { .. } => Ok(None),
        EncoderConfig::External { bridge, .. } => {
            Ok(Some(BridgeEncoder::new(BridgeClient::spawn(bridge).map_err(|e| e.to_string())?)))
        }
    }
}

/// Train with whichever encoder the config names.
pub fn train_stage2(
    examples: &[Stage2Example],
    config: &Stage2Config,
    bridge: Option<&BridgeEncoder>,
) -> Result<Stage2Model, stage2::Stage2Error> {
    match bridge {
        Some(b) if !matches!(config.encoder, EncoderConfig::Builtin { .. }) => stage2::train_with_bridge(examples, config, b),
        _ => stage2::train(examples, config),
    }
}

struct Stage2Evaluated {
    matrix: ConfusionMatrix,
    folds: Vec<FoldSummary>,
    /// Out-of-sample prediction for each refined event where available.
    predictions: Vec<Option<Prediction>>,
}

fn evaluate_stage2(
    examples: &[Stage2Example],
    config: &Stage2Config,
    evaluation: Stage2Evaluation,
    seed: u64,
    bridge: Option<&BridgeEncoder>,
) -> Result<Stage2Evaluated, String> {
    let classes: Vec<&str> = Stage2Class::ORDER.iter().map(|c| c.as_str()).collect();
    let labels: Vec<&str> = examples.iter().map(|e| e.class.as_str()).collect();
    let fit_and_predict = |train: &[usize], test: &[usize]| -> Result<Vec<Prediction>, stage2::Stage2Error> {
        let train_set: Vec<Stage2Example> = train.iter().map(|&i| examples[i].clone()).collect();
        let model = train_stage2(&train_set, config, bridge)?;
        let texts: Vec<&str> = test.iter().map(|&i| examples[i].text.as_str()).collect();
        model.classify_texts(&texts, bridge)
    };
    match evaluation {
        Stage2Evaluation::CrossValidation { folds, stratified, parallel } => {
            let slots: Mutex<Vec<Option<Prediction>>> = Mutex::new(vec![None; examples.len()]);
            let options = FoldOptions { k: folds, seed, stratified };
            let outcome = crossval(&labels, &classes, options, parallel && bridge.is_none(), |_, train, test| {
                let preds = fit_and_predict(train, test)?;
                let mut slots = slots.lock().expect("prediction slots");
                for (&i, p) in test.iter().zip(&preds) {
                    slots[i] = Some(p.clone());
                }
                Ok::<_, stage2::Stage2Error>(preds.iter().map(|p| p.class.as_str().to_string()).collect())
            })
            .map_err(|e| e.to_string())?;
            let folds = outcome
                .folds
                .iter()
                .map(|f| FoldSummary { fold: f.fold, test_size: f.test_indices.len(), accuracy: f.report.accuracy })
                .collect();
            Ok(Stage2Evaluated {
                matrix: outcome.accumulated,
                folds,
                predictions: slots.into_inner().expect("prediction slots"),
            })
        }
        Stage2Evaluation::TrainTest { train_fraction } => {
            let class_of: Vec<Stage2Class> = examples.iter().map(|e| e.class).collect();
            let (mut train, mut test) = holdout_split(&class_of, 1.0 - train_fraction, seed);
            train.sort_unstable();
            test.sort_unstable();
            if test.is_empty() {
                return Err("train/test split left no test events".into());
            }
            let preds = fit_and_predict(&train, &test).map_err(|e| e.to_string())?;
            let truths: Vec<&str> = test.iter().map(|&i| labels[i]).collect();
            let pred_labels: Vec<&str> = preds.iter().map(|p| p.class.as_str()).collect();
            let matrix = confusion(&truths, &pred_labels, &classes).map_err(|e| e.to_string())?;
            let mut predictions = vec![None; examples.len()];
            for (&i, p) in test.iter().zip(preds) {
                predictions[i] = Some(p);
            }
            let folds = vec![FoldSummary { fold: 0, test_size: test.len(), accuracy: metrics(&matrix).accuracy }];
            Ok(Stage2Evaluated { matrix, folds, predictions })
        }
    }
}

/// Execute every stage and write the run artifacts to `config.output_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let mut out = OutputDir::create(&config.output_dir)?;
    match run_stages(config, &mut out) {
        Ok(summary) => {
            out.finish()?;
            Ok(summary)
        }
        Err(e) => {
            out.fail(&e);
            Err(e)
        }
    }
}

fn run_stages(config: &PipelineConfig, out: &mut OutputDir) -> Result<RunSummary, PipelineError> {
    let seed = config.seed;

    // ingest
    log::info!("ingesting {}", config.corpus.display());
    let file = fs::File::open(&config.corpus)
        .map_err(|e| PipelineError::data(Stage::Ingest, format!("{}: {e}", config.corpus.display())))?;
    let ingest = ingest_events(file, config.corpus_format(), &config.cleaner())
        .map_err(|e| PipelineError::data(Stage::Ingest, e))?;
    let corpus = ingest.corpus;
    if corpus.is_empty() {
        return Err(PipelineError::data(Stage::Ingest, "empty corpus"));
    }
    let unlabeled = corpus.count(RawLabel::Unlabeled);
    if unlabeled > 0 {
        return Err(PipelineError::data(Stage::Ingest, format!("{unlabeled} events are unlabeled")));
    }
    let corpus_ref = CorpusRef::of_file(&config.corpus, corpus.len()).map_err(|e| PipelineError::internal(Stage::Ingest, e))?;

    // vectorize
    let vocab = load_vocab(config.vocabulary.as_deref()).map_err(|e| PipelineError::data(Stage::Vectorize, e))?;
    let provenance = Provenance::new(config.config_hash(), seed, vocab.version());
    out.write(Stage::Ingest, INGEST_ERRORS_FILE, stamp(&provenance, RowErrors { row_errors: ingest.row_errors.clone() }).to_json())?;
    out.write(Stage::Vectorize, DISTRIBUTION_FILE, stamp(&provenance, distribution_by_group(&corpus, &vocab)).to_json())?;

    // prescreen
    log::info!("training prescreen on {} events", corpus.len());
    let split =
        split_train_test(&corpus, config.train_fraction, seed).map_err(|e| PipelineError::data(Stage::Prescreen, e))?;
    for w in &split.warnings {
        log::warn!("{w}");
    }
    let (xs, ys) = design_matrix(&split.train, &vocab);
    let model = prescreen::train(&xs, &ys, &config.prescreen_hyperparams(), vocab.version())
        .and_then(|o| o.model.with_threshold(config.threshold))
        .map_err(|e| PipelineError::data(Stage::Prescreen, e))?;
    out.write(Stage::Prescreen, PRESCREEN_MODEL_FILE, stamp(&provenance, model.clone()).to_json())?;
    let screened = prescreen::prescreen(&model, &corpus, &vocab).map_err(|e| PipelineError::internal(Stage::Prescreen, e))?;
    let side_matrix = |indices: &[usize]| {
        let events: Vec<&EventRecord> = indices.iter().map(|&i| &corpus.events()[i]).collect();
        let decisions: Vec<bool> = indices.iter().map(|&i| screened.decisions[i]).collect();
        binary_matrix(&events, &decisions)
    };
    let train_matrix = side_matrix(&split.train_indices);
    let test_matrix = side_matrix(&split.test_indices);
    let prescreen_report = PrescreenReport {
        train: metrics(&train_matrix),
        test: metrics(&test_matrix),
        train_exclusion_rate: exclusion_rate(&train_matrix),
        test_exclusion_rate: exclusion_rate(&test_matrix),
        train_matrix,
        test_matrix,
    };
    out.write(Stage::Prescreen, PRESCREEN_REPORT_FILE, render_prescreen(&provenance, &prescreen_report))?;
    out.write(Stage::Prescreen, PRESCREEN_REPORT_JSON, stamp(&provenance, prescreen_report.clone()).to_json())?;

    // refine
    let mut eligible: Vec<usize> = match config.stage2_source {
        SourceSplit::Train => split.train_indices.clone(),
        SourceSplit::Test => split.test_indices.clone(),
        SourceSplit::Both => split.train_indices.iter().chain(&split.test_indices).copied().collect(),
    };
    eligible.sort_unstable();
    let refined = build_refined(&corpus, &eligible, &screened.probabilities, &screened.decisions)
        .map_err(|e| PipelineError::data(Stage::Refine, e))?;
    let sdie_before = eligible.iter().filter(|&&i| corpus.events()[i].raw_label.is_sdie()).count();
    let sdie_after = refined.events.iter().filter(|r| r.class != Stage2Class::NonSdie).count();
    let balance = StageBalance::new(eligible.len(), sdie_before, refined.events.len(), sdie_after);
    log::info!("refined stage-2 set: {} events ({} SDIE)", refined.events.len(), sdie_after);
    let in_train: std::collections::HashSet<usize> = split.train_indices.iter().copied().collect();
    let mut refined_jsonl = String::new();
    for r in &refined.events {
        let event = &corpus.events()[r.index];
        let row = RefinedRow {
            row: event.to_row(),
            class: r.class,
            split: if in_train.contains(&r.index) { SplitSide::Train } else { SplitSide::Test },
            prescreen_probability: r.prescreen_probability,
            provenance: provenance.clone(),
        };
        refined_jsonl.push_str(&serde_json::to_string(&row).expect("row serializes"));
        refined_jsonl.push('\n');
    }
    out.write(Stage::Refine, REFINED_FILE, refined_jsonl)?;

    // stage 2
    let stage2_config = config.stage2_config();
    let examples: Vec<Stage2Example> = refined
        .events
        .iter()
        .map(|r| Stage2Example::new(corpus.events()[r.index].level2_text.clone(), r.class))
        .collect();
    let bridge = connect_bridge(&stage2_config).map_err(|e| PipelineError::internal(Stage::Stage2, e))?;
    log::info!("evaluating stage 2 on {} events", examples.len());
    let evaluated = evaluate_stage2(&examples, &stage2_config, config.stage2_evaluation, seed, bridge.as_ref())
        .map_err(|e| PipelineError::data(Stage::Stage2, e))?;
    log::info!("training final stage-2 model");
    let final_model =
        train_stage2(&examples, &stage2_config, bridge.as_ref()).map_err(|e| PipelineError::data(Stage::Stage2, e))?;
    out.write(Stage::Stage2, STAGE2_MODEL_FILE, stamp(&provenance, final_model.clone()).to_json())?;

    // review queue: out-of-sample predictions, falling back to the final model
    let missing: Vec<usize> = (0..examples.len()).filter(|&i| evaluated.predictions[i].is_none()).collect();
    let mut predictions = evaluated.predictions;
    if !missing.is_empty() {
        let texts: Vec<&str> = missing.iter().map(|&i| examples[i].text.as_str()).collect();
        let filled =
            final_model.classify_texts(&texts, bridge.as_ref()).map_err(|e| PipelineError::internal(Stage::Stage2, e))?;
        for (i, p) in missing.into_iter().zip(filled) {
            predictions[i] = Some(p);
        }
    }
    let items = refined
        .events
        .iter()
        .zip(&predictions)
        .map(|(r, p)| queue_item(&corpus.events()[r.index], &vocab, r.prescreen_probability, p.as_ref().expect("filled")))
        .collect();
    let queue = ReviewQueue { corpus: corpus_ref.clone(), items };
    out.write(Stage::Report, REVIEW_QUEUE_FILE, stamp(&provenance, queue).to_json())?;

    let stage2_report = Stage2Report {
        evaluation: config.stage2_evaluation,
        report: metrics(&evaluated.matrix),
        matrix: evaluated.matrix,
        folds: evaluated.folds,
        stage_balance: balance.clone(),
    };
    out.write(Stage::Report, STAGE2_REPORT_FILE, render_stage2(&provenance, &stage2_report))?;
    out.write(Stage::Report, STAGE2_REPORT_JSON, stamp(&provenance, stage2_report.clone()).to_json())?;
    if let Some(b) = bridge {
        if let Err(e) = b.into_client().shutdown() {
            log::warn!("bridge shutdown: {e}");
        }
    }

    let mut artifacts = out.written.clone();
    artifacts.push(SUMMARY_FILE.to_string());
    let summary = RunSummary {
        corpus: corpus_ref,
        ingest_row_errors: ingest.row_errors.len(),
        train_events: split.train_indices.len(),
        test_events: split.test_indices.len(),
        stage2_source: config.stage2_source,
        refined_events: refined.events.len(),
        excluded_types_dropped: refined.excluded_types_dropped,
        sdie_missed: refined.sdie_missed,
        prescreen_test_accuracy: prescreen_report.test.accuracy,
        prescreen_test_exclusion_rate: prescreen_report.test_exclusion_rate,
        stage2_accuracy: stage2_report.report.accuracy,
        stage_balance: balance,
        artifacts,
    };
    out.write(Stage::Report, SUMMARY_FILE, stamp(&provenance, summary.clone()).to_json())?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
struct RowErrors {
    row_errors: Vec<RowError>,
}

/// Line of `refined.jsonl`; readable by the corpus ingester.
#[derive(Debug, Clone, Serialize)]
struct RefinedRow {
    #[serde(flatten)]
    row: crate::corpus::EventRow,
    class: Stage2Class,
    split: SplitSide,
    prescreen_probability: f64,
    provenance: Provenance,
}

pub fn render_prescreen(provenance: &Provenance, report: &PrescreenReport) -> String {
    let mut s = provenance.header();
    s.push('\n');
    s.push_str(&render_report(&report.train, ReportStyle::BinaryTable, "Prescreening, training set"));
    s.push('\n');
    s.push_str(&render_report(&report.test, ReportStyle::BinaryTable, "Prescreening, test set"));
    s.push('\n');
    s.push_str(&format!(
        "non-SDIE exclusion: training {:.1}%, test {:.1}%\n",
        report.train_exclusion_rate * 100.0,
        report.test_exclusion_rate * 100.0
    ));
    s
}

pub fn render_stage2(provenance: &Provenance, report: &Stage2Report) -> String {
    let title = match report.evaluation {
        Stage2Evaluation::CrossValidation { folds, .. } => format!("Stage 2, {folds}-fold cross-validation (accumulated)"),
        Stage2Evaluation::TrainTest { .. } => "Stage 2, held-out test set".to_string(),
    };
    let mut s = provenance.header();
    s.push('\n');
    s.push_str(&render_report(&report.report, ReportStyle::FourClassTable, &title));
    s.push('\n');
    for f in &report.folds {
        s.push_str(&format!("fold {}: {} events, accuracy {:.1}%\n", f.fold + 1, f.test_size, f.accuracy * 100.0));
    }
    s.push('\n');
    s.push_str(&report.stage_balance.render());
    s
}
