//! Seeded synthetic event corpus.
//!
//! SDIE events are rendered from per-class templates whose `{SLOT}`s draw
//! sub-pattern phrases from the vocabulary: `{SD_MODE}`, `{LOAC}` and the
//! other category names pick from a whole category, `{P20}` picks from one
//! pattern. Non-SDIE events are built from distractor sentences that contain
//! no sub-pattern at all; with probability `noise_rate` one stray sub-pattern
//! is added.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EventRecord, RawLabel};
use crate::patterns::{PatternCategory, PatternVocabulary};
use crate::text::Cleaner;

/// Relative sizes of the four SDIE types used by the presets.
pub const SDIE_PROPORTIONS: [(RawLabel, usize); 4] =
    [(RawLabel::Isol, 27), (RawLabel::Flow, 23), (RawLabel::Loac, 89), (RawLabel::Loop, 54)];

const ARTIFACTS: &[&str] = &["_0x00D_", "***", "\n", "\\n", "\n\n"];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("no events requested")]
    NothingRequested,
    #[error("noise rate {0} must be in [0, 1)")]
    BadNoiseRate(f64),
    #[error("artifact rate {0} must be in [0, 1]")]
    BadArtifactRate(f64),
    #[error("cannot generate {0} events")]
    BadLabel(String),
    #[error("empty template pool for {0}")]
    EmptyPool(String),
    #[error("template for {class} has unknown slot {{{slot}}}")]
    UnknownSlot { class: String, slot: String },
    #[error("template for {class} never produces a {category} pattern: {template:?}")]
    MissingCategory { class: String, category: PatternCategory, template: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub counts: BTreeMap<RawLabel, usize>,
    /// Chance that a non-SDIE event carries one stray sub-pattern.
    pub noise_rate: f64,
    /// Chance of a formatting artifact between sentences.
    pub artifact_rate: f64,
    pub seed: u64,
    pub id_prefix: String,
    pub with_dates: bool,
    /// Replaces the built-in template pool for the listed classes.
    pub templates: BTreeMap<RawLabel, Vec<String>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            counts: BTreeMap::new(),
            noise_rate: 0.05,
            artifact_rate: 0.1,
            seed: 42,
            id_prefix: "SYN".into(),
            with_dates: true,
            templates: BTreeMap::new(),
        }
    }
}

/// Split `total` across `weights` by largest remainder; ties go to the
/// earlier entry.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let mut rema: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, w)| (total * w % sum, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        out[i] += 1;
    }
    out
}

impl SyntheticSpec {
    /// `total` events of which `sdie_fraction` are SDIEs spread over the four
    /// SDIE types in [`SDIE_PROPORTIONS`].
    pub fn imbalanced(total: usize, sdie_fraction: f64, seed: u64) -> Self {
        let n_sdie = (total as f64 * sdie_fraction).round() as usize;
        let weights: Vec<usize> = SDIE_PROPORTIONS.iter().map(|p| p.1).collect();
        let mut counts: BTreeMap<RawLabel, usize> =
            SDIE_PROPORTIONS.iter().map(|p| p.0).zip(apportion(n_sdie, &weights)).collect();
        counts.insert(RawLabel::NonSdie, total - n_sdie);
        Self { counts, seed, ..Self::default() }
    }

    /// 10,000 events, 2% SDIEs.
    pub fn prescreen_acceptance(seed: u64) -> Self {
        Self::imbalanced(10_000, 0.02, seed)
    }

    /// The refined stage-two set: 27/23/89/54 SDIEs and 314 non-SDIEs that
    /// all carry a stray pattern.
    pub fn stage2_acceptance(seed: u64) -> Self {
        let mut counts: BTreeMap<RawLabel, usize> = SDIE_PROPORTIONS.into_iter().collect();
        counts.insert(RawLabel::NonSdie, 314);
        Self { counts, noise_rate: 0.999, seed, ..Self::default() }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

fn builtin_templates(label: RawLabel) -> &'static [&'static str] {
    match label {
        RawLabel::Isol => &[
            "While in {SD_MODE}, the {P13} suction {P26} {P31} unexpectedly, resulting in {P9}.",
            "During {SD_MODE}, an inadvertent {P32} of the {P23} logic caused {P25}.",
            "With the plant in {SD_MODE}, the {P27} received a spurious {P30} signal and {P12} was {P29}.",
            "In {SD_MODE}, a technician error during relay testing produced {P24} and {P11}.",
            "A spurious high pressure signal in {SD_MODE} caused {P26} {P31} and {P10}.",
        ],
        RawLabel::Flow => &[
            "While in {SD_MODE}, {P28} flow was {P33} when a suction strainer clogged and {P14} degraded.",
            "In {SD_MODE}, a misaligned service water valve diverted flow away from the {P12} heat exchanger, an {P33} of cooling.",
            "During {SD_MODE}, air entrainment at the {P27} caused flow {P33} and {P11}.",
            "With the unit in {SD_MODE}, component cooling water to the {P13} heat exchanger was blocked, an {P33} that stopped {P14}.",
        ],
        RawLabel::Loac => &[
            "While in {SD_MODE}, a ground fault on the {P20} left it {P22}, causing {P15} to {P13} equipment.",
            "In {SD_MODE}, the {P18} output breaker opened and the {P20} was {P22}, resulting in {P17}.",
            "During {SD_MODE}, an {P19} load sequencer failure caused {P15} on the {P20}.",
            "With the plant in {SD_MODE}, a maintenance error {P22} the {P20} and {P12} was lost.",
            "During {SD_MODE}, {P16} occurred when a station transformer faulted before the {P18} restored the {P20}.",
            "While in {SD_MODE}, {P41} on the {P20} followed a feeder breaker fault, and the {P18} failed to start.",
        ],
        RawLabel::Loop => &[
            "While in {SD_MODE}, a grid disturbance caused {P40} and each {P18} started automatically.",
            "In {SD_MODE}, a switchyard breaker fault resulted in {P40}; the {P18} carried the safety loads.",
            "During {SD_MODE}, severe weather led to {P42} and {P41} at the site.",
            "With the unit in {SD_MODE}, {P41} to all safety buses followed a transmission line fault.",
            "In {SD_MODE}, a main transformer fire caused {P40} until offsite circuits were restored.",
            "During {SD_MODE}, {P40} left the {P20} {P22} until the {P18} picked up the loads.",
        ],
        RawLabel::Loca => &[
            "While in {SD_MODE}, an inadvertent {P35} of the {P38} lowered {P36} {P37}.",
            "In {SD_MODE}, a valve lineup error caused {P35} through the {P39}, a {P34} event.",
            "During {SD_MODE}, a seal failure lowered {P37} in the {P36}.",
        ],
        RawLabel::Sfp => &[
            "While in {SD_MODE}, {P43} was lost when the pool pump breaker opened.",
            "During {SD_MODE}, a heat exchanger leak degraded {P43} for several hours.",
        ],
        RawLabel::NonSdie | RawLabel::Unlabeled => &[],
    }
}

/// Each category in this list must be reachable from every template of the
/// class.
fn required_categories(label: RawLabel) -> Vec<PatternCategory> {
    let own = match label {
        RawLabel::Isol | RawLabel::Flow => PatternCategory::IsolFlow,
        RawLabel::Loac => PatternCategory::Loac,
        RawLabel::Loop => PatternCategory::Loop,
        RawLabel::Loca => PatternCategory::Loca,
        RawLabel::Sfp => PatternCategory::Sfp,
        RawLabel::NonSdie | RawLabel::Unlabeled => return Vec::new(),
    };
    vec![own, PatternCategory::SdMode]
}

const SUBJECTS: &[&str] = &[
    "A technician",
    "Operations staff",
    "The maintenance crew",
    "A contractor",
    "Security personnel",
    "The shift supervisor",
    "A resident inspector",
    "System engineering",
    "Chemistry personnel",
    "A radiation protection technician",
];

const VERBS: &[&str] =
    &["identified", "reported", "documented", "found", "observed", "corrected", "evaluated", "replaced"];

const OBJECTS: &[&str] = &[
    "a degraded gasket on a sample cooler",
    "an expired calibration sticker",
    "a missing fire barrier seal",
    "a mislabeled pressure gauge",
    "a leaking instrument air fitting",
    "an outdated procedure revision",
    "a worn motor bearing on a ventilation fan",
    "incorrect torque values on a flange",
    "a failed indicator lamp",
    "a cracked weld on a pipe support",
    "an unsecured scaffold",
    "a dosimeter reading error",
    "a blocked floor drain",
    "a missed surveillance deadline",
    "a software error in the plant computer",
    "a damaged cable tray cover",
    "excessive vibration on a condensate pump",
    "an oil leak on a feedwater heater drain pump",
    "a stuck damper in the control room ventilation",
    "a faulty smoke detector",
];

const CONTEXTS: &[&str] = &[
    "in the turbine building",
    "during a routine surveillance",
    "at full power",
    "during a quarterly inspection",
    "in the auxiliary building",
    "while reviewing records",
    "in the radwaste area",
    "during a fire drill",
    "at the intake structure",
    "during a walkdown",
    "while the unit operated normally",
    "in the warehouse",
];

const CLOSINGS: &[&str] = &[
    "No safety systems were affected.",
    "The condition was entered into the corrective action program.",
    "There was no impact on plant operation.",
    "The event had no radiological consequences.",
    "Corrective maintenance was completed the same day.",
    "The issue was reported for trending purposes.",
];

const STRAY_CARRIERS: &[&str] = &[
    "The narrative also mentioned {}.",
    "A note referenced {} from an earlier report.",
    "Reviewers compared the item with {}.",
];

/// Every distractor building block, for checking that none of them match.
pub fn distractor_fragments() -> impl Iterator<Item = &'static str> {
    SUBJECTS.iter().chain(VERBS).chain(OBJECTS).chain(CONTEXTS).chain(CLOSINGS).copied().chain(
        STRAY_CARRIERS.iter().map(|c| c.trim_end_matches('.').trim_end_matches("{}")),
    )
}

fn distractor_sentence(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} {} {} {}.",
        SUBJECTS.choose(rng).expect("subjects"),
        VERBS.choose(rng).expect("verbs"),
        OBJECTS.choose(rng).expect("objects"),
        CONTEXTS.choose(rng).expect("contexts")
    )
}

enum Slot {
    Category(PatternCategory),
    Pattern(usize),
}

fn parse_slot(name: &str, vocab: &PatternVocabulary) -> Option<Slot> {
    if let Some(cat) = PatternCategory::ALL.into_iter().find(|c| c.to_string() == name) {
        return Some(Slot::Category(cat));
    }
    let idx: usize = name.strip_prefix('P')?.parse().ok()?;
    (idx < vocab.len()).then_some(Slot::Pattern(idx))
}

/// Split a template into literal text and slot names.
fn pieces(template: &str) -> Vec<(bool, &str)> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        out.push((false, &rest[..open]));
        out.push((true, &rest[open + 1..open + close]));
        rest = &rest[open + close + 1..];
    }
    out.push((false, rest));
    out
}

fn check_template(label: RawLabel, template: &str, vocab: &PatternVocabulary) -> Result<(), SynthError> {
    let mut reachable = Vec::new();
    let mut literal = String::new();
    for (is_slot, text) in pieces(template) {
        if is_slot {
            match parse_slot(text, vocab) {
                Some(Slot::Category(c)) => reachable.push(c),
                Some(Slot::Pattern(i)) => reachable.extend(vocab.category_of(i)),
                None => return Err(SynthError::UnknownSlot { class: label.to_string(), slot: text.to_string() }),
            }
            literal.push_str(" , ");
        } else {
            literal.push_str(text);
        }
    }
    reachable.extend(vocab.match_spans(&literal).iter().filter_map(|s| vocab.category_of(s.pattern)));
    for category in required_categories(label) {
        if !reachable.contains(&category) {
            return Err(SynthError::MissingCategory { class: label.to_string(), category, template: template.to_string() });
        }
    }
    Ok(())
}

fn pick_phrase(slot: &Slot, vocab: &PatternVocabulary, rng: &mut ChaCha8Rng) -> String {
    let index = match slot {
        Slot::Pattern(i) => *i,
        Slot::Category(c) => *vocab.indices_in(*c).choose(rng).expect("category has patterns"),
    };
    let subs = &vocab.patterns()[index].sub_patterns;
    subs.choose(rng).expect("pattern has sub-patterns").phrase().to_string()
}

fn render(template: &str, vocab: &PatternVocabulary, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for (is_slot, text) in pieces(template) {
        if is_slot {
            let slot = parse_slot(text, vocab).expect("templates are checked before rendering");
            out.push_str(&pick_phrase(&slot, vocab, rng));
        } else {
            out.push_str(text);
        }
    }
    out
}

fn join_sentences(sentences: &[String], artifact_rate: f64, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            if rng.random::<f64>() < artifact_rate {
                out.push(' ');
                out.push_str(ARTIFACTS.choose(rng).expect("artifacts"));
                out.push(' ');
            } else {
                out.push(' ');
            }
        }
        out.push_str(s);
    }
    out
}

fn random_date(rng: &mut ChaCha8Rng) -> NaiveDate {
    let start = NaiveDate::from_ymd_opt(1991, 12, 9).expect("valid date");
    let end = NaiveDate::from_ymd_opt(2021, 11, 27).expect("valid date");
    start + Duration::days(rng.random_range(0..=(end - start).num_days()))
}

/// Generate the corpus described by `spec`. The same spec and vocabulary
/// always give the same corpus.
pub fn generate_synthetic(spec: &SyntheticSpec, vocab: &PatternVocabulary) -> Result<Corpus, SynthError> {
    if spec.total() == 0 {
        return Err(SynthError::NothingRequested);
    }
    if !(0.0..1.0).contains(&spec.noise_rate) {
        return Err(SynthError::BadNoiseRate(spec.noise_rate));
    }
    if !(0.0..=1.0).contains(&spec.artifact_rate) {
        return Err(SynthError::BadArtifactRate(spec.artifact_rate));
    }
    let mut pools: BTreeMap<RawLabel, Vec<String>> = BTreeMap::new();
    for (&label, &count) in spec.counts.iter().filter(|(_, n)| **n > 0) {
        if label == RawLabel::Unlabeled {
            return Err(SynthError::BadLabel(label.to_string()));
        }
        if label == RawLabel::NonSdie {
            continue;
        }
        let pool: Vec<String> = match spec.templates.get(&label) {
            Some(custom) => custom.clone(),
            None => builtin_templates(label).iter().map(|s| s.to_string()).collect(),
        };
        if pool.is_empty() && count > 0 {
            return Err(SynthError::EmptyPool(label.to_string()));
        }
        for t in &pool {
            check_template(label, t, vocab)?;
        }
        pools.insert(label, pool);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut drafts: Vec<(RawLabel, String)> = Vec::with_capacity(spec.total());
    for (&label, &count) in &spec.counts {
        for _ in 0..count {
            let mut sentences = Vec::new();
            if label == RawLabel::NonSdie {
                sentences.push(distractor_sentence(&mut rng));
                if rng.random_bool(0.5) {
                    sentences.push(distractor_sentence(&mut rng));
                }
                if rng.random::<f64>() < spec.noise_rate {
                    let index = rng.random_range(0..vocab.len());
                    let phrase = pick_phrase(&Slot::Pattern(index), vocab, &mut rng);
                    let carrier = STRAY_CARRIERS.choose(&mut rng).expect("carriers");
                    let at = rng.random_range(0..=sentences.len());
                    sentences.insert(at, carrier.replace("{}", &phrase));
                }
            } else {
                let template = pools[&label].choose(&mut rng).expect("non-empty pool");
                sentences.push(render(template, vocab, &mut rng));
                if rng.random_bool(0.4) {
                    sentences.push(distractor_sentence(&mut rng));
                }
            }
            if rng.random_bool(0.5) {
                sentences.push(CLOSINGS.choose(&mut rng).expect("closings").to_string());
            }
            let text = join_sentences(&sentences, spec.artifact_rate, &mut rng);
            drafts.push((label, text));
        }
    }
    drafts.shuffle(&mut rng);

    let cleaner = Cleaner::default();
    let events = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (label, text))| {
            let mut e = EventRecord::new(format!("{}-{:06}", spec.id_prefix, i + 1), text, label, &cleaner);
            e.source = Some("synthetic".into());
            if spec.with_dates {
                e.event_date = Some(random_date(&mut rng));
            }
            e
        })
        .collect();
    Ok(Corpus::new(events).expect("generated ids are unique"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> PatternVocabulary {
        PatternVocabulary::default_sdie()
    }

    fn spec(counts: &[(RawLabel, usize)], noise: f64) -> SyntheticSpec {
        SyntheticSpec { counts: counts.iter().copied().collect(), noise_rate: noise, ..Default::default() }
    }

    #[test]
    fn distractors_never_match() {
        let v = vocab();
        for frag in distractor_fragments() {
            assert!(v.match_spans(frag).is_empty(), "{frag:?} matches {:?}", v.match_spans(frag));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let s = distractor_sentence(&mut rng);
            assert!(v.match_spans(&s).is_empty(), "{s}");
        }
    }

    #[test]
    fn loop_events_carry_loop_patterns() {
        let v = vocab();
        let c = generate_synthetic(&spec(&[(RawLabel::Loop, 3)], 0.0), &v).unwrap();
        assert_eq!(c.len(), 3);
        for e in c.iter() {
            let x = v.vectorize(&e.level1_text);
            assert!(x[40] + x[41] + x[42] >= 1, "{}", e.level1_text);
        }
    }

    #[test]
    fn clean_non_sdie_vectorizes_to_zero() {
        let v = vocab();
        let c = generate_synthetic(&spec(&[(RawLabel::NonSdie, 100)], 0.0), &v).unwrap();
        assert_eq!(c.len(), 100);
        assert!(c.iter().all(|e| v.vectorize(&e.level1_text).total() == 0));
    }

    #[test]
    fn every_sdie_has_category_and_mode_patterns() {
        let v = vocab();
        let counts: Vec<(RawLabel, usize)> = RawLabel::LABELED.iter().map(|l| (*l, 40)).collect();
        let c = generate_synthetic(&spec(&counts, 0.5), &v).unwrap();
        for e in c.iter().filter(|e| e.raw_label.is_sdie()) {
            let cats: Vec<_> = v.match_spans(&e.level1_text).iter().filter_map(|s| v.category_of(s.pattern)).collect();
            for need in required_categories(e.raw_label) {
                assert!(cats.contains(&need), "{:?} lacks {need}: {}", e.raw_label, e.level1_text);
            }
        }
    }

    #[test]
    fn noise_rate_controls_stray_patterns() {
        let v = vocab();
        let c = generate_synthetic(&spec(&[(RawLabel::NonSdie, 300)], 0.5), &v).unwrap();
        let noisy = c.iter().filter(|e| !v.match_spans(&e.level1_text).is_empty()).count();
        assert!((100..200).contains(&noisy), "{noisy}");
    }

    #[test]
    fn acceptance_tallies() {
        let s = SyntheticSpec::prescreen_acceptance(7);
        let expected = [
            (RawLabel::Isol, 28),
            (RawLabel::Flow, 24),
            (RawLabel::Loac, 92),
            (RawLabel::Loop, 56),
            (RawLabel::NonSdie, 9800),
        ];
        assert_eq!(s.counts, expected.into_iter().collect());
        let c = generate_synthetic(&s, &vocab()).unwrap();
        for (label, n) in expected {
            assert_eq!(c.count(label), n);
        }
        assert_eq!(c.len(), 10_000);
        let s2 = SyntheticSpec::stage2_acceptance(7);
        assert_eq!(s2.total(), 507);
    }

    #[test]
    fn deterministic_under_seed() {
        let v = vocab();
        let s = spec(&[(RawLabel::Loac, 20), (RawLabel::NonSdie, 50)], 0.2);
        let a = generate_synthetic(&s, &v).unwrap();
        assert_eq!(a, generate_synthetic(&s, &v).unwrap());
        let other = SyntheticSpec { seed: 43, ..s };
        assert_ne!(a, generate_synthetic(&other, &v).unwrap());
        assert_eq!(a.events()[0].id, "SYN-000001");
    }

    #[test]
    fn largest_remainder() {
        assert_eq!(apportion(200, &[27, 23, 89, 54]), [28, 24, 92, 56]);
        assert_eq!(apportion(193, &[27, 23, 89, 54]), [27, 23, 89, 54]);
        assert_eq!(apportion(3, &[1, 1, 1, 1]), [1, 1, 1, 0]);
        assert_eq!(apportion(5, &[0, 0]), [0, 0]);
    }

    #[test]
    fn spec_errors() {
        let v = vocab();
        assert_eq!(generate_synthetic(&spec(&[], 0.0), &v).unwrap_err(), SynthError::NothingRequested);
        assert_eq!(generate_synthetic(&spec(&[(RawLabel::Loop, 1)], 1.0), &v).unwrap_err(), SynthError::BadNoiseRate(1.0));
        let mut s = spec(&[(RawLabel::Loop, 1)], 0.0);
        s.templates.insert(RawLabel::Loop, vec![]);
        assert_eq!(generate_synthetic(&s, &v).unwrap_err(), SynthError::EmptyPool("LOOP".into()));
        s.templates.insert(RawLabel::Loop, vec!["In {SD_MODE} the {NOPE} failed.".into()]);
        assert!(matches!(generate_synthetic(&s, &v), Err(SynthError::UnknownSlot { .. })));
        s.templates.insert(RawLabel::Loop, vec!["In {SD_MODE} a {P18} failed.".into()]);
        assert!(matches!(generate_synthetic(&s, &v), Err(SynthError::MissingCategory { .. })));
        // literal pattern text also satisfies the requirement
        s.templates.insert(RawLabel::Loop, vec!["In {SD_MODE} a loss of offsite power occurred.".into()]);
        assert!(generate_synthetic(&s, &v).is_ok());
    }

    #[test]
    fn builtin_templates_are_valid() {
        let v = vocab();
        for label in RawLabel::LABELED {
            for t in builtin_templates(label) {
                check_template(label, t, &v).unwrap();
            }
        }
    }
}
