//! SDIE pattern vocabulary and count vectorization.
//!
//! A vocabulary is an ordered list of patterns; each pattern groups one or more
//! literal sub-pattern phrases. The feature value for pattern `k` is the sum,
//! over its sub-patterns, of how often that phrase occurs in the text.
//!
//! Matching is case-sensitive and token-aligned: text and phrases are both
//! split with [`tokenize`], and a phrase matches a run of consecutive whole
//! tokens. Within one sub-pattern occurrences are counted left to right without
//! overlap; distinct sub-patterns (and patterns) are counted independently, so
//! one span of text may contribute to several features.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, EventRecord};
use crate::text::tokenize;

const DEFAULT_VOCABULARY: &str = include_str!("../data/default_vocabulary.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PatternCategory {
    SdMode,
    LossOfSdc,
    Loac,
    IsolFlow,
    Loca,
    Loop,
    Sfp,
}

impl PatternCategory {
    pub const ALL: [PatternCategory; 7] = [
        PatternCategory::SdMode,
        PatternCategory::LossOfSdc,
        PatternCategory::Loac,
        PatternCategory::IsolFlow,
        PatternCategory::Loca,
        PatternCategory::Loop,
        PatternCategory::Sfp,
    ];
}

impl fmt::Display for PatternCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PatternCategory::SdMode => "SD_MODE",
            PatternCategory::LossOfSdc => "LOSS_OF_SDC",
            PatternCategory::Loac => "LOAC",
            PatternCategory::IsolFlow => "ISOL_FLOW",
            PatternCategory::Loca => "LOCA",
            PatternCategory::Loop => "LOOP",
            PatternCategory::Sfp => "SFP",
        };
        f.write_str(s)
    }
}

/// A literal phrase, stored with its token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubPattern {
    phrase: String,
    tokens: Vec<String>,
}

impl SubPattern {
    /// `None` when the phrase has no tokens.
    pub fn new(phrase: &str) -> Option<Self> {
        let tokens: Vec<String> = tokenize(phrase).into_iter().map(|t| t.text.to_string()).collect();
        if tokens.is_empty() {
            return None;
        }
        Some(Self { phrase: phrase.trim().to_string(), tokens })
    }

    pub fn phrase(&self) -> &str {
        &self.phrase
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub index: usize,
    pub category: PatternCategory,
    pub sub_patterns: Vec<SubPattern>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabularyError {
    #[error("vocabulary document does not parse: {0}")]
    Parse(String),
    #[error("vocabulary has no patterns")]
    Empty,
    #[error("duplicate pattern index {0}")]
    DuplicateIndex(usize),
    #[error("gap at {0}")]
    Gap(usize),
    #[error("pattern {0} has no sub-patterns")]
    NoSubPatterns(usize),
    #[error("pattern {index} has an empty sub-pattern at position {position}")]
    EmptySubPattern { index: usize, position: usize },
}

/// Serialized vocabulary document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabularyDocument {
    pub name: String,
    pub version: String,
    pub patterns: Vec<PatternEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternEntry {
    pub index: usize,
    pub category: PatternCategory,
    pub sub_patterns: Vec<String>,
}

/// Where a sub-pattern lives: pattern index, flat sub-pattern id.
#[derive(Debug, Clone, Copy)]
struct Slot {
    pattern: usize,
    sub: usize,
}

/// Immutable, validated vocabulary with a first-token index for matching.
#[derive(Debug, Clone)]
pub struct PatternVocabulary {
    name: String,
    version: String,
    patterns: Vec<Pattern>,
    /// Flat list of every sub-pattern, in pattern order.
    flat: Vec<SubPattern>,
    by_first_token: HashMap<String, Vec<Slot>>,
}

impl PatternVocabulary {
    /// The 44-pattern SDIE vocabulary shipped with the crate.
    pub fn default_sdie() -> Self {
        load_vocabulary(DEFAULT_VOCABULARY).expect("shipped vocabulary is valid")
    }

    pub fn from_document(doc: VocabularyDocument) -> Result<Self, VocabularyError> {
        if doc.patterns.is_empty() {
            return Err(VocabularyError::Empty);
        }
        let mut entries = doc.patterns;
        entries.sort_by_key(|p| p.index);
        let mut seen = HashSet::new();
        for p in &entries {
            if !seen.insert(p.index) {
                return Err(VocabularyError::DuplicateIndex(p.index));
            }
        }
        for (expected, p) in entries.iter().enumerate() {
            if p.index != expected {
                return Err(VocabularyError::Gap(expected));
            }
        }
        let mut patterns = Vec::with_capacity(entries.len());
        for entry in entries {
            if entry.sub_patterns.is_empty() {
                return Err(VocabularyError::NoSubPatterns(entry.index));
            }
            let sub_patterns = entry
                .sub_patterns
                .iter()
                .enumerate()
                .map(|(position, phrase)| {
                    SubPattern::new(phrase).ok_or(VocabularyError::EmptySubPattern { index: entry.index, position })
                })
                .collect::<Result<Vec<_>, _>>()?;
            patterns.push(Pattern { index: entry.index, category: entry.category, sub_patterns });
        }

        let mut flat = Vec::new();
        let mut by_first_token: HashMap<String, Vec<Slot>> = HashMap::new();
        for p in &patterns {
            for sp in &p.sub_patterns {
                let slot = Slot { pattern: p.index, sub: flat.len() };
                by_first_token.entry(sp.tokens[0].clone()).or_default().push(slot);
                flat.push(sp.clone());
            }
        }
        Ok(Self { name: doc.name, version: doc.version, patterns, flat, by_first_token })
    }

    pub fn to_document(&self) -> VocabularyDocument {
        VocabularyDocument {
            name: self.name.clone(),
            version: self.version.clone(),
            patterns: self
                .patterns
                .iter()
                .map(|p| PatternEntry {
                    index: p.index,
                    category: p.category,
                    sub_patterns: p.sub_patterns.iter().map(|s| s.phrase.clone()).collect(),
                })
                .collect(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn category_of(&self, index: usize) -> Option<PatternCategory> {
        self.patterns.get(index).map(|p| p.category)
    }

    /// Pattern indices belonging to `category`, ascending.
    pub fn indices_in(&self, category: PatternCategory) -> Vec<usize> {
        self.patterns.iter().filter(|p| p.category == category).map(|p| p.index).collect()
    }

    /// Every sub-pattern match in `text`, sorted by start token then pattern.
    pub fn match_spans(&self, text: &str) -> Vec<PatternSpan> {
        let tokens = tokenize(text);
        let mut next_free = vec![0usize; self.flat.len()];
        let mut spans = Vec::new();
        for pos in 0..tokens.len() {
            let Some(slots) = self.by_first_token.get(tokens[pos].text) else {
                continue;
            };
            for slot in slots {
                if pos < next_free[slot.sub] {
                    continue;
                }
                let phrase = &self.flat[slot.sub].tokens;
                let end = pos + phrase.len();
                if end > tokens.len() || !phrase.iter().zip(&tokens[pos..end]).all(|(p, t)| p == t.text) {
                    continue;
                }
                next_free[slot.sub] = end;
                spans.push(PatternSpan {
                    pattern: slot.pattern,
                    phrase: self.flat[slot.sub].phrase.clone(),
                    start_token: pos,
                    end_token: end,
                    start_byte: tokens[pos].start,
                    end_byte: tokens[end - 1].end,
                });
            }
        }
        spans.sort_by_key(|s| (s.start_token, s.pattern, s.end_token));
        spans
    }

    /// Pattern-count feature vector for level-1 text.
    pub fn vectorize(&self, text: &str) -> FeatureVector {
        let mut counts = vec![0u32; self.patterns.len()];
        for span in self.match_spans(text) {
            counts[span.pattern] += 1;
        }
        FeatureVector { counts }
    }
}

/// Parse and validate a vocabulary JSON document.
pub fn load_vocabulary(document: &str) -> Result<PatternVocabulary, VocabularyError> {
    let doc: VocabularyDocument = serde_json::from_str(document).map_err(|e| VocabularyError::Parse(e.to_string()))?;
    PatternVocabulary::from_document(doc)
}

/// One occurrence of a sub-pattern. Token range is half-open; byte range
/// points into the matched text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpan {
    pub pattern: usize,
    pub phrase: String,
    pub start_token: usize,
    pub end_token: usize,
    pub start_byte: usize,
    pub end_byte: usize,
}

/// Occurrences of one phrase as consecutive whole tokens, counted left to
/// right without overlap.
pub fn count_sub_pattern(text: &str, sub: &SubPattern) -> usize {
    let tokens = tokenize(text);
    let n = sub.tokens.len();
    let mut count = 0;
    let mut i = 0;
    while i + n <= tokens.len() {
        if sub.tokens.iter().zip(&tokens[i..i + n]).all(|(p, t)| p == t.text) {
            count += 1;
            i += n;
        } else {
            i += 1;
        }
    }
    count
}

/// Non-negative pattern counts, one per vocabulary entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector {
    counts: Vec<u32>,
}

impl FeatureVector {
    pub fn new(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    pub fn zeros(len: usize) -> Self {
        Self { counts: vec![0; len] }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| f64::from(c)).collect()
    }
}

impl std::ops::Index<usize> for FeatureVector {
    type Output = u32;

    fn index(&self, i: usize) -> &u32 {
        &self.counts[i]
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DistributionError {
    #[error("cannot average over an empty set of events")]
    EmptySubset,
}

/// Mean of each feature over a set of events.
pub fn pattern_distribution<'a, I>(events: I, vocab: &PatternVocabulary) -> Result<Vec<f64>, DistributionError>
where
    I: IntoIterator<Item = &'a EventRecord>,
{
    let mut sums = vec![0.0; vocab.len()];
    let mut n = 0usize;
    for e in events {
        let x = vocab.vectorize(&e.level1_text);
        for (s, &c) in sums.iter_mut().zip(x.counts()) {
            *s += f64::from(c);
        }
        n += 1;
    }
    if n == 0 {
        return Err(DistributionError::EmptySubset);
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

/// Per-pattern means over SDIE and non-SDIE events of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub vocabulary_version: String,
    pub sdie_events: usize,
    pub non_sdie_events: usize,
    pub sdie_mean: Vec<f64>,
    pub non_sdie_mean: Vec<f64>,
}

/// Unlabeled events are ignored; an empty side yields a zero mean.
pub fn distribution_by_group(corpus: &Corpus, vocab: &PatternVocabulary) -> DistributionSummary {
    let sdie: Vec<_> = corpus.iter().filter(|e| e.raw_label.is_sdie()).collect();
    let non: Vec<_> = corpus.iter().filter(|e| e.raw_label == crate::corpus::RawLabel::NonSdie).collect();
    let mean = |events: &[&EventRecord]| {
        pattern_distribution(events.iter().copied(), vocab).unwrap_or_else(|_| vec![0.0; vocab.len()])
    };
    DistributionSummary {
        vocabulary_version: vocab.version().to_string(),
        sdie_events: sdie.len(),
        non_sdie_events: non.len(),
        sdie_mean: mean(&sdie),
        non_sdie_mean: mean(&non),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RawLabel;
    use crate::text::Cleaner;

    fn sub(p: &str) -> SubPattern {
        SubPattern::new(p).unwrap()
    }

    #[test]
    fn default_vocabulary_shape() {
        let v = PatternVocabulary::default_sdie();
        assert_eq!(v.len(), 44);
        let sizes: Vec<usize> = PatternCategory::ALL.iter().map(|&c| v.indices_in(c).len()).collect();
        assert_eq!(sizes, [9, 6, 8, 11, 6, 3, 1]);
        let sfp = v.indices_in(PatternCategory::Sfp);
        assert_eq!(sfp, [43]);
        assert_eq!(v.patterns()[43].sub_patterns.len(), 3);
        // grouping chosen for the unbalanced rows
        let phrases = |i: usize| v.patterns()[i].sub_patterns.iter().map(|s| s.phrase().to_string()).collect::<Vec<_>>();
        assert_eq!(phrases(27), ["RHR pump"]);
        assert_eq!(phrases(28).len(), 4);
        assert_eq!(phrases(38), ["Reactor Coolant System", "RCS"]);
        // contiguous category ranges
        assert_eq!(v.indices_in(PatternCategory::IsolFlow), (23..=33).collect::<Vec<_>>());
        assert_eq!(v.indices_in(PatternCategory::Loca), (34..=39).collect::<Vec<_>>());
        assert_eq!(v.indices_in(PatternCategory::Loop), (40..=42).collect::<Vec<_>>());
    }

    #[test]
    fn document_round_trip() {
        let v = PatternVocabulary::default_sdie();
        let json = serde_json::to_string(&v.to_document()).unwrap();
        let again = load_vocabulary(&json).unwrap();
        assert_eq!(again.patterns(), v.patterns());
    }

    #[test]
    fn vocabulary_validation() {
        let single = r#"{"name":"x","version":"1","patterns":[{"index":0,"category":"LOOP","sub_patterns":["LOOP"]}]}"#;
        assert_eq!(load_vocabulary(single).unwrap().len(), 1);

        let gap = r#"{"name":"x","version":"1","patterns":[
            {"index":0,"category":"LOOP","sub_patterns":["a"]},
            {"index":2,"category":"LOOP","sub_patterns":["b"]}]}"#;
        let err = load_vocabulary(gap).unwrap_err();
        assert_eq!(err.to_string(), "gap at 1");

        let dup = r#"{"name":"x","version":"1","patterns":[
            {"index":0,"category":"LOOP","sub_patterns":["a"]},
            {"index":0,"category":"LOOP","sub_patterns":["b"]}]}"#;
        assert_eq!(load_vocabulary(dup).unwrap_err(), VocabularyError::DuplicateIndex(0));

        let empty_sub = r#"{"name":"x","version":"1","patterns":[{"index":0,"category":"SFP","sub_patterns":["SFP"," -- "]}]}"#;
        assert_eq!(load_vocabulary(empty_sub).unwrap_err(), VocabularyError::EmptySubPattern { index: 0, position: 1 });

        let none = r#"{"name":"x","version":"1","patterns":[{"index":0,"category":"SFP","sub_patterns":[]}]}"#;
        assert_eq!(load_vocabulary(none).unwrap_err(), VocabularyError::NoSubPatterns(0));

        assert!(matches!(load_vocabulary("{"), Err(VocabularyError::Parse(_))));
    }

    #[test]
    fn count_examples() {
        assert_eq!(count_sub_pattern("", &sub("SDC")), 0);
        assert_eq!(count_sub_pattern("SDC SDC pump", &sub("SDC")), 2);
        assert_eq!(count_sub_pattern("the reactor", &sub("AC")), 0);
        assert_eq!(count_sub_pattern("ACTUATED", &sub("AC")), 0);
        assert_eq!(count_sub_pattern("loss of offsite power", &sub("loss of power")), 0);
        assert_eq!(count_sub_pattern("a a a", &sub("a a")), 1);
        assert_eq!(count_sub_pattern("loss of SDC; loss of SDC.", &sub("loss of SDC")), 2);
        // case-sensitive
        assert_eq!(count_sub_pattern("sdc", &sub("SDC")), 0);
    }

    #[test]
    fn vectorize_examples() {
        let v = PatternVocabulary::default_sdie();
        assert_eq!(v.vectorize(""), FeatureVector::zeros(44));

        let x = v.vectorize("Mode 5 Cold Shutdown entered; loss of SDC occurred");
        let mut expected = vec![0u32; 44];
        expected[2] = 1;
        expected[5] = 1;
        expected[9] = 1;
        expected[12] = 1;
        assert_eq!(x.counts(), &expected[..]);

        let x = v.vectorize("partial loss of offsite power");
        assert_eq!((x[16], x[40], x[41]), (1, 1, 0));
        assert_eq!(x.total(), 2);
    }

    #[test]
    fn spans_for_highlighting() {
        let v = PatternVocabulary::default_sdie();
        assert!(v.match_spans("").is_empty());
        let spans = v.match_spans("SDC");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].pattern, 12);
        assert_eq!((spans[0].start_token, spans[0].end_token), (0, 1));

        let text = "The 4.16kv bus was de-energized";
        let spans = v.match_spans(text);
        let hit: Vec<_> = spans.iter().map(|s| (s.pattern, &text[s.start_byte..s.end_byte])).collect();
        assert_eq!(hit, [(20, "4.16kv bus"), (22, "de-energized")]);
    }

    #[test]
    fn distribution() {
        let v = PatternVocabulary::default_sdie();
        let c = Cleaner::default();
        let a = EventRecord::new("a", "routine surveillance", RawLabel::NonSdie, &c);
        let b = EventRecord::new("b", "Mode 3 and Mode 3", RawLabel::NonSdie, &c);
        let one = pattern_distribution([&b], &v).unwrap();
        assert_eq!(one, v.vectorize(&b.level1_text).to_f64());
        let avg = pattern_distribution([&a, &b], &v).unwrap();
        assert_eq!(avg[0], 1.0);
        assert_eq!(pattern_distribution(std::iter::empty(), &v), Err(DistributionError::EmptySubset));
    }
}
