//! Confusion matrices, per-class metrics, k-fold cross-validation and report
//! tables.
//!
//! JSON export of an [`EvalReport`] uses these fields:
//! `n`, `correct`, `accuracy`, `accuracy_undefined`, and `classes`, a list of
//! `{class, support, predicted_total, correct, precision, recall, f1,
//! precision_undefined, recall_undefined, f1_undefined}`. Ratios are in
//! `[0, 1]`; an `*_undefined` flag marks a zero denominator, in which case the
//! value is reported as 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SDIE: &str = "SDIE";
pub const NON_SDIE: &str = "NON_SDIE";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("{truths} truths but {predictions} predictions")]
    LengthMismatch { truths: usize, predictions: usize },
    #[error("label {0:?} is not in the class order")]
    UnknownLabel(String),
    #[error("class order must be non-empty and free of duplicates")]
    BadClassOrder,
    #[error("counts must form a {0}x{0} matrix")]
    BadShape(usize),
    #[error("matrices have different class orders")]
    ClassMismatch,
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("class {class} has {count} members, fewer than k={k}")]
    ClassTooSmall { class: String, count: usize, k: usize },
    #[error("inconsistent tallies: {0}")]
    BadTally(String),
    #[error("fold {fold}: {message}")]
    Fold { fold: usize, message: String },
}

/// Square count matrix; rows are truth, columns are prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new<S: AsRef<str>>(classes: &[S]) -> Result<Self, EvalError> {
        let classes: Vec<String> = classes.iter().map(|c| c.as_ref().to_string()).collect();
        let mut sorted = classes.clone();
        sorted.sort();
        sorted.dedup();
        if classes.is_empty() || sorted.len() != classes.len() {
            return Err(EvalError::BadClassOrder);
        }
        let k = classes.len();
        Ok(Self { classes, counts: vec![vec![0; k]; k] })
    }

    pub fn from_counts<S: AsRef<str>>(classes: &[S], counts: Vec<Vec<u64>>) -> Result<Self, EvalError> {
        let mut m = Self::new(classes)?;
        let k = m.classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(EvalError::BadShape(k));
        }
        m.counts = counts;
        Ok(m)
    }

    /// Binary SDIE / non-SDIE matrix from the four cells.
    pub fn binary(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self::from_counts(&[SDIE, NON_SDIE], vec![vec![tp, fn_], vec![fp, tn]]).expect("2x2")
    }

    /// Binary matrix from published-style tallies: true positives, predicted
    /// positives, actual positives and total. True negatives are whatever
    /// remains of `n`.
    pub fn from_binary_tally(tp: u64, predicted_positive: u64, actual_positive: u64, n: u64) -> Result<Self, EvalError> {
        if tp > predicted_positive || tp > actual_positive || predicted_positive + actual_positive - tp > n {
            return Err(EvalError::BadTally(format!(
                "tp={tp} predicted={predicted_positive} actual={actual_positive} n={n}"
            )));
        }
        let fp = predicted_positive - tp;
        let fn_ = actual_positive - tp;
        Ok(Self::binary(tp, fp, fn_, n - tp - fp - fn_))
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn add(&mut self, truth: &str, prediction: &str) -> Result<(), EvalError> {
        let t = self.index_of(truth).ok_or_else(|| EvalError::UnknownLabel(truth.to_string()))?;
        let p = self.index_of(prediction).ok_or_else(|| EvalError::UnknownLabel(prediction.to_string()))?;
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth][prediction]
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn predicted_total(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn actual_total(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn fp(&self, c: usize) -> u64 {
        self.predicted_total(c) - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        self.actual_total(c) - self.tp(c)
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.n() - self.tp(c) - self.fp(c) - self.fn_(c)
    }

    /// Elementwise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if self.classes != other.classes {
            return Err(EvalError::ClassMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

/// Tally `(truth, prediction)` pairs.
pub fn confusion<A: AsRef<str>, B: AsRef<str>, S: AsRef<str>>(
    truths: &[A],
    predictions: &[B],
    classes: &[S],
) -> Result<ConfusionMatrix, EvalError> {
    if truths.len() != predictions.len() {
        return Err(EvalError::LengthMismatch { truths: truths.len(), predictions: predictions.len() });
    }
    let mut m = ConfusionMatrix::new(classes)?;
    for (t, p) in truths.iter().zip(predictions) {
        m.add(t.as_ref(), p.as_ref())?;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    /// Actual members of the class.
    pub support: u64,
    /// TP + FP.
    pub predicted_total: u64,
    /// TP.
    pub correct: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub accuracy_undefined: bool,
    pub classes: Vec<ClassMetrics>,
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class == name)
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> EvalReport {
    let classes = (0..cm.classes.len())
        .map(|c| {
            let tp = cm.tp(c);
            let (precision, pu) = ratio(tp, cm.predicted_total(c));
            let (recall, ru) = ratio(tp, cm.actual_total(c));
            let (f1, fu) = if pu || ru || precision + recall == 0.0 {
                (0.0, true)
            } else {
                (2.0 * precision * recall / (precision + recall), false)
            };
            ClassMetrics {
                class: cm.classes[c].clone(),
                support: cm.actual_total(c),
                predicted_total: cm.predicted_total(c),
                correct: tp,
                precision,
                recall,
                f1,
                precision_undefined: pu,
                recall_undefined: ru,
                f1_undefined: fu,
            }
        })
        .collect();
    let (accuracy, accuracy_undefined) = ratio(cm.diagonal(), cm.n());
    EvalReport { n: cm.n(), correct: cm.diagonal(), accuracy, accuracy_undefined, classes }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldOptions {
    pub k: usize,
    pub seed: u64,
    /// Deal each class across folds separately. When false, folds are a plain
    /// shuffled partition.
    pub stratified: bool,
}

impl Default for FoldOptions {
    fn default() -> Self {
        Self { k: 5, seed: 42, stratified: true }
    }
}

/// Partition `0..labels.len()` into `k` disjoint folds.
///
/// Stratified: each class is shuffled, the classes are concatenated in label
/// order and the sequence is dealt round-robin, so fold sizes differ by at
/// most one and every class lands within one of `n_c / k` in each fold.
/// Each fold is returned sorted.
pub fn make_folds<L: AsRef<str>>(labels: &[L], options: FoldOptions) -> Result<Vec<Vec<usize>>, EvalError> {
    let k = options.k;
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_ref()).or_default().push(i);
    }
    if let Some((class, members)) = groups.iter().find(|(_, m)| m.len() < k) {
        return Err(EvalError::ClassTooSmall { class: class.to_string(), count: members.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let order: Vec<usize> = if options.stratified {
        groups
            .into_values()
            .flat_map(|mut members| {
                members.shuffle(&mut rng);
                members
            })
            .collect()
    } else {
        let mut all: Vec<usize> = (0..labels.len()).collect();
        all.shuffle(&mut rng);
        all
    };
    let mut folds = vec![Vec::new(); k];
    for (j, i) in order.into_iter().enumerate() {
        folds[j % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub matrix: ConfusionMatrix,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValOutcome {
    /// Sum of the fold matrices.
    pub accumulated: ConfusionMatrix,
    /// Metrics of the accumulated matrix.
    pub report: EvalReport,
    pub folds: Vec<FoldResult>,
}

/// k-fold cross-validation. `trainer(train, test)` fits a model on the
/// `train` indices and returns one predicted label per `test` index. With
/// `parallel`, folds train on separate threads; results are identical.
pub fn crossval<L, S, F, E>(
    labels: &[L],
    classes: &[S],
    options: FoldOptions,
    parallel: bool,
    trainer: F,
) -> Result<CrossValOutcome, EvalError>
where
    L: AsRef<str> + Sync,
    S: AsRef<str>,
    F: Fn(usize, &[usize], &[usize]) -> Result<Vec<String>, E> + Sync,
    E: std::fmt::Display,
{
    let folds = make_folds(labels, options)?;
    let train_of = |f: usize| -> Vec<usize> {
        folds.iter().enumerate().filter(|(j, _)| *j != f).flat_map(|(_, idx)| idx.iter().copied()).collect::<Vec<_>>()
    };
    let run = |f: usize| -> Result<Vec<String>, EvalError> {
        let mut train = train_of(f);
        train.sort_unstable();
        let preds = trainer(f, &train, &folds[f]).map_err(|e| EvalError::Fold { fold: f, message: e.to_string() })?;
        if preds.len() != folds[f].len() {
            return Err(EvalError::Fold {
                fold: f,
                message: format!("{} predictions for {} test samples", preds.len(), folds[f].len()),
            });
        }
        Ok(preds)
    };
    let predictions: Vec<Result<Vec<String>, EvalError>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..folds.len()).map(|f| s.spawn(move || run(f))).collect();
            handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
        })
    } else {
        (0..folds.len()).map(run).collect()
    };
    let mut accumulated = ConfusionMatrix::new(classes)?;
    let mut results = Vec::with_capacity(folds.len());
    for (f, preds) in predictions.into_iter().enumerate() {
        let preds = preds?;
        let truths: Vec<&str> = folds[f].iter().map(|&i| labels[i].as_ref()).collect();
        let matrix = confusion(&truths, &preds, classes)?;
        accumulated.merge(&matrix)?;
        results.push(FoldResult { fold: f, test_indices: folds[f].clone(), report: metrics(&matrix), matrix });
    }
    Ok(CrossValOutcome { report: metrics(&accumulated), accumulated, folds: results })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStyle {
    /// Two-class prescreen table; ratios as percentages.
    BinaryTable,
    /// Four-class table; recall before precision, F1 to two decimals.
    FourClassTable,
}

pub fn display_name(class: &str) -> String {
    match class {
        "ISOL_FLOW" => "ISOL&FLOW".into(),
        "NON_SDIE" => "Non-SDIE".into(),
        other => other.into(),
    }
}

/// `1234567` -> `1,234,567`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn percent(v: f64, undefined: bool) -> String {
    if undefined {
        "n/a".into()
    } else {
        format!("{:.1}%", v * 100.0)
    }
}

fn fixed2(v: f64, undefined: bool) -> String {
    if undefined {
        "n/a".into()
    } else {
        format!("{v:.2}")
    }
}

/// Fixed-width table. `A/B` cells give correct predictions over all
/// predictions of a class; the total column gives correct over all samples.
pub fn render_report(report: &EvalReport, style: ReportStyle, title: &str) -> String {
    let dash = || "-".to_string();
    let mut header = vec![String::new()];
    header.extend(report.classes.iter().map(|c| display_name(&c.class)));
    header.push("Total".into());

    let row = |label: &str, cells: Vec<String>, total: String| {
        let mut r = vec![label.to_string()];
        r.extend(cells);
        r.push(total);
        r
    };
    let events = row(
        "# of events",
        report.classes.iter().map(|c| thousands(c.support)).collect(),
        thousands(report.n),
    );
    let predicted = row(
        "predicted*",
        report.classes.iter().map(|c| format!("{}/{}", thousands(c.correct), thousands(c.predicted_total))).collect(),
        format!("{}/{}", thousands(report.correct), thousands(report.n)),
    );
    let precision = row("precision", report.classes.iter().map(|c| percent(c.precision, c.precision_undefined)).collect(), dash());
    let recall = row("recall", report.classes.iter().map(|c| percent(c.recall, c.recall_undefined)).collect(), dash());
    let f1 = match style {
        ReportStyle::BinaryTable => row("F1", report.classes.iter().map(|c| percent(c.f1, c.f1_undefined)).collect(), dash()),
        ReportStyle::FourClassTable => row("F1", report.classes.iter().map(|c| fixed2(c.f1, c.f1_undefined)).collect(), dash()),
    };
    let accuracy = row("accuracy", report.classes.iter().map(|_| dash()).collect(), percent(report.accuracy, report.accuracy_undefined));
    let body = match style {
        ReportStyle::BinaryTable => vec![events, predicted, precision, recall, f1, accuracy],
        ReportStyle::FourClassTable => vec![events, predicted, recall, precision, f1, accuracy],
    };

    let mut rows = vec![header];
    rows.extend(body);
    let widths: Vec<usize> =
        (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    if !title.is_empty() {
        let _ = writeln!(out, "{title}");
    }
    for r in &rows {
        let mut line = String::new();
        for (j, cell) in r.iter().enumerate() {
            if j == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[j]);
            }
        }
        let _ = writeln!(out, "{}", line.trim_end());
    }
    out.push_str("* A/B: correctly detected samples / all samples predicted as the class (TP + FP)\n");
    out
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}
