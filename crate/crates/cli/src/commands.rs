use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdie_core::corpus::{ingest_events, map_stage2_label, Corpus, RawLabel, Stage2Class, Stage2Target};
use sdie_core::eval::{confusion, crossval, metrics, render_report, report_json, FoldOptions, ReportStyle};
use sdie_core::patterns::{distribution_by_group, PatternVocabulary};
use sdie_core::pipeline::{
    connect_bridge, format_for_path, load_vocab, read_artifact, run_pipeline, train_stage2, Artifact, FailureKind,
    PipelineConfig, Provenance,
};
use sdie_core::prescreen::{self, design_matrix, PrescreenModel};
use sdie_core::stage2::{Stage2Example, Stage2Model};
use sdie_core::synth::{generate_synthetic, SyntheticSpec};
use sdie_review::ServiceConfig;

use crate::{Command, Common, Input};

#[derive(Debug)]
pub enum CliError {
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Data(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn data(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn internal(e: impl fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| internal(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| internal(format!("{}: {e}", path.display())))
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r).expect("row serializes"));
        out.push('\n');
    }
    out
}

/// Effective pipeline config: file (or defaults) with flag overrides.
struct Context {
    config: PipelineConfig,
    vocab: PatternVocabulary,
}

impl Context {
    fn new(common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(path) => PipelineConfig::load(path).map_err(data)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &common.vocabulary {
            config.vocabulary = Some(v.clone());
        }
        if let Some(s) = common.seed {
            config.seed = s;
        }
        let vocab = load_vocab(config.vocabulary.as_deref()).map_err(data)?;
        Ok(Self { config, vocab })
    }

    fn provenance(&self) -> Provenance {
        Provenance::new(self.config.config_hash(), self.config.seed, self.vocab.version())
    }

    fn stamp<T>(&self, body: T) -> Artifact<T> {
        Artifact { provenance: Some(self.provenance()), body }
    }

    fn load_corpus(&self, input: &Input) -> Result<Corpus> {
        let format = input.format.unwrap_or_else(|| format_for_path(&input.input));
        let file = File::open(&input.input).map_err(|e| data(format!("{}: {e}", input.input.display())))?;
        let outcome = ingest_events(file, format, &self.config.cleaner()).map_err(data)?;
        for e in &outcome.row_errors {
            log::warn!("{}: row {}: {}", input.input.display(), e.row, e.message);
        }
        Ok(outcome.corpus)
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest { input, out, errors, common } => {
            let ctx = Context::new(&common)?;
            let format = input.format.unwrap_or_else(|| format_for_path(&input.input));
            let file = File::open(&input.input).map_err(|e| data(format!("{}: {e}", input.input.display())))?;
            let outcome = ingest_events(file, format, &ctx.config.cleaner()).map_err(data)?;
            let mut buf = Vec::new();
            outcome.corpus.write_jsonl(&mut buf).map_err(internal)?;
            write_file(&out, buf)?;
            if let Some(path) = errors {
                write_file(&path, jsonl(&outcome.row_errors))?;
            }
            log::info!(
                "{} events written, {} malformed rows, {} unrecognized labels",
                outcome.corpus.len(),
                outcome.row_errors.len(),
                outcome.label_warnings
            );
            Ok(())
        }
        Command::Clean { input, out, common } => {
            let ctx = Context::new(&common)?;
            let corpus = ctx.load_corpus(&input)?;
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                level1: &'a str,
                level2: &'a str,
            }
            write_file(
                &out,
                jsonl(corpus.iter().map(|e| Row { id: &e.id, level1: &e.level1_text, level2: &e.level2_text })),
            )
        }
        Command::Vectorize { input, out, common } => {
            let ctx = Context::new(&common)?;
            let corpus = ctx.load_corpus(&input)?;
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                label: Option<&'static str>,
                x: &'a [u32],
            }
            let vectors: Vec<_> = corpus.iter().map(|e| ctx.vocab.vectorize(&e.level1_text)).collect();
            write_file(
                &out,
                jsonl(corpus.iter().zip(&vectors).map(|(e, x)| Row {
                    id: &e.id,
                    label: e.raw_label.is_labeled().then(|| e.raw_label.as_str()),
                    x: x.counts(),
                })),
            )
        }
        Command::PatternsStats { input, out, common } => {
            let ctx = Context::new(&common)?;
            let corpus = ctx.load_corpus(&input)?;
            write_file(&out, ctx.stamp(distribution_by_group(&corpus, &ctx.vocab)).to_json())
        }
        Command::TrainPrescreen { input, out, epochs, threshold, common } => {
            let mut ctx = Context::new(&common)?;
            if let Some(e) = epochs {
                ctx.config.prescreen.epochs = e;
            }
            if let Some(t) = threshold {
                ctx.config.threshold = t;
            }
            let corpus = ctx.load_corpus(&input)?;
            let (xs, ys) = design_matrix(&corpus, &ctx.vocab);
            if xs.is_empty() {
                return Err(data("no labeled events to train on"));
            }
            let model = prescreen::train(&xs, &ys, &ctx.config.prescreen_hyperparams(), ctx.vocab.version())
                .and_then(|o| o.model.with_threshold(ctx.config.threshold))
                .map_err(data)?;
            write_file(&out, ctx.stamp(model).to_json())
        }
        Command::Prescreen { input, model, out, common } => {
            let ctx = Context::new(&common)?;
            let model = read_artifact::<PrescreenModel>(&model).map_err(data)?.body;
            if model.vocabulary_version != ctx.vocab.version() {
                return Err(data(format!(
                    "model was trained with vocabulary {}, but {} is loaded",
                    model.vocabulary_version,
                    ctx.vocab.version()
                )));
            }
            let corpus = ctx.load_corpus(&input)?;
            let result = prescreen::prescreen(&model, &corpus, &ctx.vocab).map_err(data)?;
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                probability: f64,
                suspected_sdie: bool,
            }
            log::info!("{} of {} events kept as possible SDIEs", result.suspected.len(), corpus.len());
            write_file(
                &out,
                jsonl(corpus.iter().enumerate().map(|(i, e)| Row {
                    id: &e.id,
                    probability: result.probabilities[i],
                    suspected_sdie: result.decisions[i],
                })),
            )
        }
        Command::TrainStage2 { input, out, max_epochs, common } => {
            let mut ctx = Context::new(&common)?;
            if let Some(m) = max_epochs {
                ctx.config.stage2.max_epochs = m;
            }
            let corpus = ctx.load_corpus(&input)?;
            let examples = stage2_examples(&corpus);
            let config = ctx.config.stage2_config();
            config.validate().map_err(data)?;
            let bridge = connect_bridge(&config).map_err(internal)?;
            let model = train_stage2(&examples, &config, bridge.as_ref()).map_err(data)?;
            write_file(&out, ctx.stamp(model).to_json())
        }
        Command::Classify { input, model, out, common } => {
            let ctx = Context::new(&common)?;
            let model = read_artifact::<Stage2Model>(&model).map_err(data)?.body;
            let corpus = ctx.load_corpus(&input)?;
            let bridge = if model.is_builtin() { None } else { connect_bridge(&ctx.config.stage2).map_err(internal)? };
            let texts: Vec<&str> = corpus.iter().map(|e| e.level2_text.as_str()).collect();
            let preds = model.classify_texts(&texts, bridge.as_ref()).map_err(internal)?;
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                label: &'static str,
                probabilities: [f64; 4],
            }
            write_file(
                &out,
                jsonl(corpus.iter().zip(&preds).map(|(e, p)| Row {
                    id: &e.id,
                    label: p.class.as_str(),
                    probabilities: p.probabilities,
                })),
            )
        }
        Command::Crossval { input, out, folds, common } => {
            let ctx = Context::new(&common)?;
            let corpus = ctx.load_corpus(&input)?;
            let examples = stage2_examples(&corpus);
            let config = ctx.config.stage2_config();
            config.validate().map_err(data)?;
            let (k, stratified, parallel) = match ctx.config.stage2_evaluation {
                sdie_core::pipeline::Stage2Evaluation::CrossValidation { folds, stratified, parallel } => {
                    (folds, stratified, parallel)
                }
                sdie_core::pipeline::Stage2Evaluation::TrainTest { .. } => (5, true, true),
            };
            let k = folds.unwrap_or(k);
            let bridge = connect_bridge(&config).map_err(internal)?;
            let labels: Vec<&str> = examples.iter().map(|e| e.class.as_str()).collect();
            let classes: Vec<&str> = Stage2Class::ORDER.iter().map(|c| c.as_str()).collect();
            let options = FoldOptions { k, seed: ctx.config.seed, stratified };
            let outcome = crossval(&labels, &classes, options, parallel && bridge.is_none(), |_, train, test| {
                let train_set: Vec<Stage2Example> = train.iter().map(|&i| examples[i].clone()).collect();
                let model = train_stage2(&train_set, &config, bridge.as_ref())?;
                let texts: Vec<&str> = test.iter().map(|&i| examples[i].text.as_str()).collect();
                Ok::<_, sdie_core::stage2::Stage2Error>(
                    model.classify_texts(&texts, bridge.as_ref())?.into_iter().map(|p| p.class.as_str().to_string()).collect(),
                )
            })
            .map_err(data)?;
            let mut text = render_report(&outcome.report, ReportStyle::FourClassTable, &format!("Stage 2, {k}-fold cross-validation (accumulated)"));
            for f in &outcome.folds {
                text.push_str(&format!("fold {}: {} events, accuracy {:.1}%\n", f.fold + 1, f.test_indices.len(), f.report.accuracy * 100.0));
            }
            write_file(&out, text)?;
            write_file(&out.with_extension("json"), ctx.stamp(outcome).to_json())
        }
        Command::Evaluate { pred, truth, stage2, out } => evaluate(&pred, &truth, stage2, out.as_deref()),
        Command::Synth { spec, preset, out, seed, vocabulary } => {
            let vocab = load_vocab(vocabulary.as_deref()).map_err(data)?;
            let mut spec = match (spec, preset.as_deref()) {
                (Some(path), _) => {
                    let text = fs::read_to_string(&path).map_err(|e| data(format!("{}: {e}", path.display())))?;
                    serde_json::from_str::<SyntheticSpec>(&text).map_err(|e| data(format!("{}: {e}", path.display())))?
                }
                (None, Some("prescreen")) => SyntheticSpec::prescreen_acceptance(42),
                (None, _) => SyntheticSpec::stage2_acceptance(42),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let corpus = generate_synthetic(&spec, &vocab).map_err(data)?;
            let mut buf = Vec::new();
            corpus.write_jsonl(&mut buf).map_err(internal)?;
            write_file(&out, buf)
        }
        Command::Run { config, output_dir, seed } => {
            let mut config = PipelineConfig::load(&config).map_err(data)?;
            if let Some(dir) = output_dir {
                config.output_dir = dir;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            let summary = run_pipeline(&config).map_err(|e| match e.kind {
                FailureKind::Data => data(&e),
                FailureKind::Internal => internal(&e),
            })?;
            log::info!(
                "run complete: prescreen test accuracy {:.1}%, stage-2 accuracy {:.1}%, artifacts in {}",
                summary.prescreen_test_accuracy * 100.0,
                summary.stage2_accuracy * 100.0,
                config.output_dir.display()
            );
            Ok(())
        }
        Command::Serve { config, bind } => {
            let mut config = ServiceConfig::load(&config).map_err(data)?;
            if let Some(b) = bind {
                config.bind = b;
            }
            sdie_review::serve(&config).map_err(internal)
        }
    }
}

/// Events with a stage-two class; LOCA/SFP and unlabeled events are skipped.
fn stage2_examples(corpus: &Corpus) -> Vec<Stage2Example> {
    corpus
        .iter()
        .filter_map(|e| match map_stage2_label(e.raw_label) {
            Ok(Stage2Target::Class(c)) => Some(Stage2Example::new(e.level2_text.clone(), c)),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    id: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    class: Option<String>,
}

fn read_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: LabelRow =
            serde_json::from_str(&line).map_err(|e| data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        let label = row
            .label
            .or(row.class)
            .ok_or_else(|| data(format!("{}: line {}: no label", path.display(), i + 1)))?;
        out.push((row.id, label));
    }
    Ok(out)
}

fn evaluate(pred: &Path, truth: &Path, stage2: bool, out: Option<&Path>) -> Result<()> {
    // Stage-two class names pass through; raw labels are mapped.
    let to_stage2 = |id: &str, label: &str| -> Result<Option<String>> {
        if let Some(c) = Stage2Class::parse(label) {
            return Ok(Some(c.as_str().to_string()));
        }
        let raw = RawLabel::parse(label).ok_or_else(|| data(format!("unknown label {label:?} for {id}")))?;
        Ok(match map_stage2_label(raw).map_err(|e| data(format!("{id}: {e}")))? {
            Stage2Target::Class(c) => Some(c.as_str().to_string()),
            Stage2Target::Excluded => None,
        })
    };
    let preds: HashMap<String, String> = read_labels(pred)?.into_iter().collect();
    let mut truths = Vec::new();
    let mut predicted = Vec::new();
    for (id, label) in read_labels(truth)? {
        let p = preds.get(&id).ok_or_else(|| data(format!("no prediction for event {id}")))?;
        if stage2 {
            let Some(label) = to_stage2(&id, &label)? else { continue };
            let p = to_stage2(&id, p)?.ok_or_else(|| data(format!("{id}: prediction is an excluded type")))?;
            truths.push(label);
            predicted.push(p);
        } else {
            truths.push(label);
            predicted.push(p.clone());
        }
    }
    if truths.is_empty() {
        return Err(data("nothing to evaluate"));
    }
    let classes: Vec<String> = if stage2 {
        Stage2Class::ORDER.iter().map(|c| c.as_str().to_string()).collect()
    } else {
        truths.iter().chain(&predicted).cloned().collect::<BTreeSet<_>>().into_iter().collect()
    };
    let cm = confusion(&truths, &predicted, &classes).map_err(data)?;
    let report = metrics(&cm);
    let style = if classes.len() == 2 { ReportStyle::BinaryTable } else { ReportStyle::FourClassTable };
    let text = render_report(&report, style, "Evaluation");
    match out {
        Some(path) => {
            write_file(path, &text)?;
            write_file(&PathBuf::from(path).with_extension("json"), report_json(&report))
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(internal),
    }
}
