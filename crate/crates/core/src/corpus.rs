//! Event records, corpus ingest, label handling and stratified splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{normalize, Cleaner};

/// Event type as annotated by analysts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RawLabel {
    Isol,
    Flow,
    Loca,
    Loac,
    Loop,
    Sfp,
    NonSdie,
    Unlabeled,
}

impl RawLabel {
    /// The seven annotatable types, in display order.
    pub const LABELED: [RawLabel; 7] = [
        RawLabel::Isol,
        RawLabel::Flow,
        RawLabel::Loca,
        RawLabel::Loac,
        RawLabel::Loop,
        RawLabel::Sfp,
        RawLabel::NonSdie,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RawLabel::Isol => "ISOL",
            RawLabel::Flow => "FLOW",
            RawLabel::Loca => "LOCA",
            RawLabel::Loac => "LOAC",
            RawLabel::Loop => "LOOP",
            RawLabel::Sfp => "SFP",
            RawLabel::NonSdie => "NON_SDIE",
            RawLabel::Unlabeled => "UNLABELED",
        }
    }

    /// Lenient parse: case-insensitive, `-` and spaces read as `_`.
    pub fn parse(s: &str) -> Option<RawLabel> {
        let key: String = s
            .trim()
            .chars()
            .map(|c| if c == '-' || c == ' ' { '_' } else { c.to_ascii_uppercase() })
            .collect();
        Some(match key.as_str() {
            "ISOL" => RawLabel::Isol,
            "FLOW" => RawLabel::Flow,
            "LOCA" => RawLabel::Loca,
            "LOAC" => RawLabel::Loac,
            "LOOP" => RawLabel::Loop,
            "SFP" => RawLabel::Sfp,
            "NON_SDIE" | "NONSDIE" => RawLabel::NonSdie,
            "UNLABELED" => RawLabel::Unlabeled,
            _ => return None,
        })
    }

    /// True for the six shutdown initiating event types.
    pub fn is_sdie(self) -> bool {
        !matches!(self, RawLabel::NonSdie | RawLabel::Unlabeled)
    }

    pub fn is_labeled(self) -> bool {
        self != RawLabel::Unlabeled
    }
}

impl fmt::Display for RawLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RawLabel {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RawLabel::parse(s).ok_or_else(|| LabelError::Unknown(s.to_string()))
    }
}

/// The four stage-two classes, in the fixed order used by every model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage2Class {
    IsolFlow,
    Loac,
    Loop,
    NonSdie,
}

impl Stage2Class {
    pub const ORDER: [Stage2Class; 4] =
        [Stage2Class::IsolFlow, Stage2Class::Loac, Stage2Class::Loop, Stage2Class::NonSdie];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage2Class> {
        Self::ORDER.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage2Class::IsolFlow => "ISOL_FLOW",
            Stage2Class::Loac => "LOAC",
            Stage2Class::Loop => "LOOP",
            Stage2Class::NonSdie => "NON_SDIE",
        }
    }

    pub fn parse(s: &str) -> Option<Stage2Class> {
        Self::ORDER.into_iter().find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for Stage2Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Result of mapping a raw label onto the stage-two label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage2Target {
    Class(Stage2Class),
    Excluded,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("event is unannotated; stage-two labels need an analyst label")]
    Unlabeled,
    #[error("unknown label {0:?}")]
    Unknown(String),
}

/// ISOL and FLOW merge; LOCA and SFP are too rare to learn and are excluded.
pub fn map_stage2_label(raw: RawLabel) -> Result<Stage2Target, LabelError> {
    Ok(match raw {
        RawLabel::Isol | RawLabel::Flow => Stage2Target::Class(Stage2Class::IsolFlow),
        RawLabel::Loac => Stage2Target::Class(Stage2Class::Loac),
        RawLabel::Loop => Stage2Target::Class(Stage2Class::Loop),
        RawLabel::NonSdie => Stage2Target::Class(Stage2Class::NonSdie),
        RawLabel::Loca | RawLabel::Sfp => Stage2Target::Excluded,
        RawLabel::Unlabeled => return Err(LabelError::Unlabeled),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: String,
    pub raw_text: String,
    /// Format-stripped text; pattern matching input.
    pub level1_text: String,
    /// Stopword-free, stemmed text; encoder input.
    pub level2_text: String,
    pub raw_label: RawLabel,
    pub source: Option<String>,
    pub event_date: Option<NaiveDate>,
    pub note: Option<String>,
}

impl EventRecord {
    pub fn new(id: impl Into<String>, raw_text: impl Into<String>, raw_label: RawLabel, cleaner: &Cleaner) -> Self {
        let raw_text = raw_text.into();
        let level1_text = cleaner.clean(&raw_text);
        let level2_text = normalize(&level1_text);
        Self {
            id: id.into(),
            raw_text,
            level1_text,
            level2_text,
            raw_label,
            source: None,
            event_date: None,
            note: None,
        }
    }

    pub fn to_row(&self) -> EventRow {
        EventRow {
            id: self.id.clone(),
            text: self.raw_text.clone(),
            label: self.raw_label.is_labeled().then(|| self.raw_label.as_str().to_string()),
            source: self.source.clone(),
            date: self.event_date.map(|d| d.format("%Y-%m-%d").to_string()),
            note: self.note.clone(),
        }
    }
}

/// On-disk record shape shared by JSONL and CSV inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRow {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub date: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate event id {id:?}")]
    DuplicateId { id: String },
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("input is not valid UTF-8 (byte offset {0})")]
    Utf8(usize),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Ordered events with a per-label tally kept in sync.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    events: Vec<EventRecord>,
    class_counts: BTreeMap<RawLabel, usize>,
}

impl Corpus {
    pub fn new(events: Vec<EventRecord>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(events.len());
        for e in &events {
            if !seen.insert(e.id.as_str()) {
                return Err(CorpusError::DuplicateId { id: e.id.clone() });
            }
        }
        let class_counts = tally(&events);
        Ok(Self { events, class_counts })
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn into_events(self) -> Vec<EventRecord> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EventRecord> {
        self.events.iter()
    }

    pub fn class_counts(&self) -> &BTreeMap<RawLabel, usize> {
        &self.class_counts
    }

    pub fn count(&self, label: RawLabel) -> usize {
        self.class_counts.get(&label).copied().unwrap_or(0)
    }

    pub fn get(&self, id: &str) -> Option<&EventRecord> {
        self.events.iter().find(|e| e.id == id)
    }

    /// Events at the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let events: Vec<_> = indices.iter().map(|&i| self.events[i].clone()).collect();
        let class_counts = tally(&events);
        Corpus { events, class_counts }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        for e in &self.events {
            serde_json::to_writer(&mut out, &e.to_row())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn tally(events: &[EventRecord]) -> BTreeMap<RawLabel, usize> {
    let mut counts = BTreeMap::new();
    for e in events {
        *counts.entry(e.raw_label).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(InputFormat::Jsonl),
            "csv" => Ok(InputFormat::Csv),
            other => Err(format!("unknown input format {other:?} (expected jsonl or csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    /// 1-based line number in the input.
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub corpus: Corpus,
    /// Rows whose label string was not recognized and became UNLABELED.
    pub label_warnings: usize,
    pub row_errors: Vec<RowError>,
}

/// Read JSONL or CSV records into a corpus, computing both cleaning levels.
/// Malformed rows are reported and skipped; a duplicate id aborts the ingest.
pub fn ingest_events<R: Read>(source: R, format: InputFormat, cleaner: &Cleaner) -> Result<IngestOutcome, CorpusError> {
    let mut bytes = Vec::new();
    BufReader::new(source).read_to_end(&mut bytes)?;
    let text = String::from_utf8(bytes).map_err(|e| CorpusError::Utf8(e.utf8_error().valid_up_to()))?;

    let mut rows: Vec<(usize, Result<EventRow, String>)> = Vec::new();
    match format {
        InputFormat::Jsonl => {
            for (i, line) in text.as_bytes().lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                rows.push((i + 1, serde_json::from_str::<EventRow>(&line).map_err(|e| e.to_string())));
            }
        }
        InputFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
            let headers = reader.headers()?.clone();
            for record in reader.records() {
                match record {
                    Ok(rec) => {
                        let line = rec.position().map_or(0, |p| p.line() as usize);
                        rows.push((line, rec.deserialize::<EventRow>(Some(&headers)).map_err(|e| e.to_string())));
                    }
                    Err(e) => {
                        let line = e.position().map_or(0, |p| p.line() as usize);
                        rows.push((line, Err(e.to_string())));
                    }
                }
            }
        }
    }

    let mut events = Vec::with_capacity(rows.len());
    let mut ids = HashSet::new();
    let mut label_warnings = 0;
    let mut row_errors = Vec::new();
    for (row_no, parsed) in rows {
        let row = match parsed {
            Ok(row) => row,
            Err(message) => {
                row_errors.push(RowError { row: row_no, message });
                continue;
            }
        };
        match record_from_row(row, cleaner) {
            Ok((record, warned)) => {
                if !ids.insert(record.id.clone()) {
                    return Err(CorpusError::DuplicateId { id: record.id });
                }
                label_warnings += usize::from(warned);
                events.push(record);
            }
            Err(message) => row_errors.push(RowError { row: row_no, message }),
        }
    }
    if label_warnings > 0 {
        log::warn!("{label_warnings} rows had unrecognized labels and were marked UNLABELED");
    }
    Ok(IngestOutcome { corpus: Corpus::new(events)?, label_warnings, row_errors })
}

fn non_empty(field: Option<String>) -> Option<String> {
    field.filter(|s| !s.trim().is_empty())
}

/// Returns the record and whether its label was unrecognized.
pub fn record_from_row(row: EventRow, cleaner: &Cleaner) -> Result<(EventRecord, bool), String> {
    if row.id.trim().is_empty() {
        return Err("empty id".into());
    }
    let (raw_label, warned) = match non_empty(row.label) {
        None => (RawLabel::Unlabeled, false),
        Some(s) => match RawLabel::parse(&s) {
            Some(l) => (l, false),
            None => (RawLabel::Unlabeled, true),
        },
    };
    let event_date = match non_empty(row.date) {
        None => None,
        Some(d) => Some(
            NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d").map_err(|e| format!("bad date {d:?}: {e}"))?,
        ),
    };
    let mut record = EventRecord::new(row.id, row.text, raw_label, cleaner);
    record.source = non_empty(row.source);
    record.event_date = event_date;
    record.note = non_empty(row.note);
    Ok((record, warned))
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub train: Corpus,
    pub test: Corpus,
    /// Indices into the source corpus, ascending.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Stratified, seeded train/test split. Each label contributes
/// `round(fraction * n)` events to train, clamped so both sides are non-empty;
/// labels with fewer than two events go wholly to train.
pub fn split_train_test(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<SplitOutcome, CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(train_fraction));
    }
    let mut by_label: BTreeMap<RawLabel, Vec<usize>> = BTreeMap::new();
    for (i, e) in corpus.events.iter().enumerate() {
        by_label.entry(e.raw_label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    let mut warnings = Vec::new();
    for (label, mut members) in by_label {
        if members.len() < 2 {
            warnings.push(format!("label {label} has {} member(s); placed wholly in train", members.len()));
            train_indices.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train_indices.extend_from_slice(&members[..n_train]);
        test_indices.extend_from_slice(&members[n_train..]);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    Ok(SplitOutcome {
        train: corpus.subset(&train_indices),
        test: corpus.subset(&test_indices),
        train_indices,
        test_indices,
        warnings,
    })
}
