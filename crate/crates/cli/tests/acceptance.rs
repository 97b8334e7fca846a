//! Acceptance suite: one PASS/FAIL line per criterion, each timed against
//! its budget.
//!
//! A criterion fails when any of its checks misses tolerance or it overruns
//! its budget. Checks listed in [`KNOWN_GAPS`] still print FAIL but do not
//! fail the process; every other failure does.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdie_core::corpus::{map_stage2_label, split_train_test, Stage2Class, Stage2Target};
use sdie_core::eval::{crossval, make_folds, metrics, ConfusionMatrix, FoldOptions};
use sdie_core::patterns::PatternVocabulary;
use sdie_core::prescreen::{self, design_matrix, PrescreenHyperparams, PrescreenModel};
use sdie_core::stage2::adam::RowTable;
use sdie_core::stage2::encoder::HashedEmbedding;
use sdie_core::stage2::head::{ClassificationHead, HeadMode, NUM_CLASSES};
use sdie_core::stage2::{train as train_stage2, Stage2Config, Stage2Example};
use sdie_core::synth::{distractor_fragments, generate_synthetic, SyntheticSpec};
use sdie_core::text::tokenize;

/// Percentage-point tolerance for the published-tally oracles.
const PP_TOL: f64 = 0.05;
/// Maximum relative error between analytic and central-difference gradients.
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const GRAD_INSTANCES: u64 = 50;
const VECTORIZER_TEXTS: u64 = 1000;
const CV_DATASETS: u64 = 200;
const PRESCREEN_MIN_RECALL: f64 = 0.95;
const PRESCREEN_MIN_EXCLUSION: f64 = 0.90;
const STAGE2_MIN_ACCURACY: f64 = 0.90;

/// (criterion, check) pairs whose failure is documented and expected: the
/// published F1 cells of the prescreen table follow from the rounded
/// precision and recall, not from the counts.
const KNOWN_GAPS: &[(&str, &str)] =
    &[("metrics oracle, prescreen training set", "F1"), ("metrics oracle, prescreen test set", "F1")];

struct Check {
    name: String,
    ok: bool,
    detail: String,
}

fn check(name: &str, ok: bool, detail: impl Into<String>) -> Check {
    Check { name: name.to_string(), ok, detail: detail.into() }
}

fn pp(name: &str, got: f64, want_percent: f64) -> Check {
    let got_pct = got * 100.0;
    let diff = (got_pct - want_percent).abs();
    check(name, diff <= PP_TOL, format!("{name} {got_pct:.3}% vs {want_percent}% (|diff| {diff:.3} pp)"))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Vec<Check>,
}

fn main() {
    let criteria = [
        Criterion { name: "metrics oracle, prescreen training set", budget: Duration::from_secs(1), run: table3_training },
        Criterion { name: "metrics oracle, prescreen test set", budget: Duration::from_secs(1), run: table3_test },
        Criterion { name: "metrics oracle, four-class rows", budget: Duration::from_secs(1), run: table4_rows },
        Criterion { name: "vectorizer oracle", budget: Duration::from_secs(5), run: vectorizer_oracle },
        Criterion { name: "gradient checks", budget: Duration::from_secs(10), run: gradient_checks },
        Criterion { name: "prescreen synthetic experiment", budget: Duration::from_secs(60), run: prescreen_experiment },
        Criterion { name: "stage-2 synthetic experiment", budget: Duration::from_secs(120), run: stage2_experiment },
        Criterion { name: "cross-validation invariants", budget: Duration::from_secs(10), run: cv_invariants },
        Criterion { name: "end-to-end determinism", budget: Duration::from_secs(180), run: end_to_end_determinism },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let mut checks = (c.run)();
        let elapsed = start.elapsed();
        checks.push(check(
            "runtime",
            elapsed <= c.budget,
            format!("{:.2}s of {}s", elapsed.as_secs_f64(), c.budget.as_secs()),
        ));
        let failed: Vec<&Check> = checks.iter().filter(|k| !k.ok).collect();
        let status = if failed.is_empty() { "PASS" } else { "FAIL" };
        let summary: Vec<&str> = checks.iter().map(|k| k.detail.as_str()).collect();
        println!("{status} {} [{}]", c.name, summary.join("; "));
        for k in failed {
            let known = KNOWN_GAPS.iter().any(|&(crit, name)| crit == c.name && name == k.name);
            if known {
                println!("     documented gap: {}", k.detail);
            } else {
                unexpected += 1;
            }
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} unexpected acceptance failure(s)");
        std::process::exit(1);
    }
}

fn binary_oracle(tp: u64, predicted: u64, actual: u64, n: u64, correct: u64, want: [f64; 4]) -> Vec<Check> {
    let cm = ConfusionMatrix::from_binary_tally(tp, predicted, actual, n).expect("consistent tally");
    let r = metrics(&cm);
    let sdie = &r.classes[0];
    vec![
        check("tally", cm.diagonal().abs_diff(correct) <= 1, format!("correct {} vs published {correct}", cm.diagonal())),
        pp("precision", sdie.precision, want[0]),
        pp("recall", sdie.recall, want[1]),
        pp("F1", sdie.f1, want[2]),
        pp("accuracy", r.accuracy, want[3]),
    ]
}

fn table3_training() -> Vec<Check> {
    binary_oracle(138, 525, 154, 7649, 7246, [26.3, 89.6, 40.7, 94.7])
}

fn table3_test() -> Vec<Check> {
    binary_oracle(51, 178, 58, 3279, 3146, [28.7, 87.9, 43.3, 95.9])
}

fn table4_rows() -> Vec<Check> {
    // Rows are truth. ISOL&FLOW: 45 right of 50 predicted, 50 actual.
    // LOOP: 43 right of 54 actual. Off-diagonal placement is otherwise free.
    let counts = vec![
        vec![45, 3, 2, 0],
        vec![3, 76, 9, 1],
        vec![2, 9, 43, 0],
        vec![0, 2, 0, 312],
    ];
    let cm = ConfusionMatrix::from_counts(&["ISOL_FLOW", "LOAC", "LOOP", "NON_SDIE"], counts).unwrap();
    let r = metrics(&cm);
    let iso = r.class("ISOL_FLOW").unwrap();
    let lp = r.class("LOOP").unwrap();
    vec![
        pp("ISOL&FLOW precision", iso.precision, 90.0),
        pp("ISOL&FLOW recall", iso.recall, 90.0),
        pp("ISOL&FLOW F1", iso.f1, 90.0),
        pp("LOOP recall", lp.recall, 79.6),
    ]
}

/// Independent reference: token-aligned, case-sensitive, left-to-right,
/// non-overlapping occurrences of each phrase, summed per pattern.
fn naive_counts(vocab: &PatternVocabulary, text: &str) -> Vec<u32> {
    let words: Vec<&str> = text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    vocab
        .patterns()
        .iter()
        .map(|p| {
            p.sub_patterns
                .iter()
                .map(|s| {
                    let phrase: Vec<&str> =
                        s.phrase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
                    let mut count = 0;
                    let mut i = 0;
                    while i + phrase.len() <= words.len() {
                        if words[i..i + phrase.len()] == phrase[..] {
                            count += 1;
                            i += phrase.len();
                        } else {
                            i += 1;
                        }
                    }
                    count
                })
                .sum()
        })
        .collect()
}

fn vectorizer_oracle() -> Vec<Check> {
    let vocab = PatternVocabulary::default_sdie();
    let phrases: Vec<String> =
        vocab.patterns().iter().flat_map(|p| p.sub_patterns.iter().map(|s| s.phrase().to_string())).collect();
    let fragments: Vec<&str> = distractor_fragments().collect();
    let separators = [" ", " ", ", ", ". ", "-", "/", "  ", "; ", "("];
    let mut mismatches = 0;
    let mut total_matches = 0u64;
    for seed in 0..VECTORIZER_TEXTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = String::new();
        for _ in 0..rng.random_range(1..16) {
            let piece = match rng.random_range(0..10) {
                0..=3 => phrases.choose(&mut rng).unwrap().clone(),
                4 => phrases.choose(&mut rng).unwrap().to_lowercase(),
                5 => {
                    let p = phrases.choose(&mut rng).unwrap();
                    tokenize(p).first().map(|t| t.text.to_string()).unwrap_or_default()
                }
                _ => fragments.choose(&mut rng).unwrap().to_string(),
            };
            text.push_str(&piece);
            text.push_str(separators.choose(&mut rng).unwrap());
        }
        let got = vocab.vectorize(&text);
        let want = naive_counts(&vocab, &text);
        total_matches += want.iter().map(|&c| u64::from(c)).sum::<u64>();
        if got.counts() != want.as_slice() {
            mismatches += 1;
        }
    }
    vec![check(
        "exact",
        mismatches == 0 && total_matches > 0,
        format!("{VECTORIZER_TEXTS} texts, {total_matches} pattern hits, {mismatches} mismatches"),
    )]
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

fn prescreen_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 44;
    let n = rng.random_range(3..20);
    let xs: Vec<Vec<f64>> =
        (0..n).map(|_| (0..dim).map(|_| f64::from(rng.random_range(0u32..3))).collect()).collect();
    let ys: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let hp = PrescreenHyperparams { alpha: rng.random_range(1e-5..1e-1), ..Default::default() };
    let mut model = PrescreenModel::zeros(dim, hp, "v");
    model.w.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    model.b = rng.random_range(-1.0..1.0);
    let (gw, gb) = model.gradient(&xs, &ys).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..=dim {
        let numeric = {
            let mut plus = model.clone();
            let mut minus = model.clone();
            if j < dim {
                plus.w[j] += FD_STEP;
                minus.w[j] -= FD_STEP;
            } else {
                plus.b += FD_STEP;
                minus.b -= FD_STEP;
            }
            (plus.loss(&xs, &ys).unwrap() - minus.loss(&xs, &ys).unwrap()) / (2.0 * FD_STEP)
        };
        let analytic = if j < dim { gw[j] } else { gb };
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Head weights, bias, and the embedding rows feeding it, through mean
/// pooling and (for odd seeds) a fixed dropout mask.
fn stage2_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let mode = if seed % 2 == 0 { HeadMode::Eval } else { HeadMode::Train { seed } };
    let head = ClassificationHead::new(dim, 0.3, seed).unwrap();
    let mut emb = HashedEmbedding::new(64, dim, seed);
    let docs: Vec<(Vec<usize>, usize)> = (0..rng.random_range(1..6))
        .map(|_| {
            let ids = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..64)).collect();
            (ids, rng.random_range(0..NUM_CLASSES))
        })
        .collect();
    let loss = |head: &ClassificationHead, emb: &HashedEmbedding| {
        let reps: Vec<Vec<f64>> = docs.iter().map(|(ids, _)| emb.encode_ids(ids)).collect();
        let batch: Vec<(&[f64], usize)> = reps.iter().zip(&docs).map(|(r, (_, y))| (r.as_slice(), *y)).collect();
        head.loss_and_grad(&batch, mode).unwrap()
    };
    let grads = loss(&head, &emb);
    let mut emb_grads = HashMap::new();
    for ((ids, _), d) in docs.iter().zip(&grads.d_inputs) {
        emb.accumulate_grad(ids, d, &mut emb_grads);
    }
    let mut worst: f64 = 0.0;
    for j in 0..head.weights.len() {
        let (mut p, mut m) = (head.clone(), head.clone());
        p.weights[j] += FD_STEP;
        m.weights[j] -= FD_STEP;
        let numeric = (loss(&p, &emb).loss - loss(&m, &emb).loss) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads.d_weights[j], numeric));
    }
    for j in 0..NUM_CLASSES {
        let (mut p, mut m) = (head.clone(), head.clone());
        p.bias[j] += FD_STEP;
        m.bias[j] -= FD_STEP;
        let numeric = (loss(&p, &emb).loss - loss(&m, &emb).loss) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads.d_bias[j], numeric));
    }
    let mut ids: Vec<usize> = emb_grads.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        for k in 0..dim {
            let orig = emb.row(id)[k];
            emb.row_mut(id)[k] = orig + FD_STEP;
            let lp = loss(&head, &emb).loss;
            emb.row_mut(id)[k] = orig - FD_STEP;
            let lm = loss(&head, &emb).loss;
            emb.row_mut(id)[k] = orig;
            worst = worst.max(rel_err(emb_grads[&id][k], (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn gradient_checks() -> Vec<Check> {
    let pre = (0..GRAD_INSTANCES).map(prescreen_gradient_error).fold(0.0, f64::max);
    let s2 = (0..GRAD_INSTANCES).map(stage2_gradient_error).fold(0.0, f64::max);
    vec![
        check("prescreen", pre <= GRAD_REL_TOL, format!("weighted BCE + L2: worst relative error {pre:.2e} over {GRAD_INSTANCES}")),
        check("stage2", s2 <= GRAD_REL_TOL, format!("softmax CE head + encoder: worst relative error {s2:.2e} over {GRAD_INSTANCES}")),
    ]
}

fn prescreen_experiment() -> Vec<Check> {
    let vocab = PatternVocabulary::default_sdie();
    let spec = SyntheticSpec::prescreen_acceptance(2024);
    let corpus = generate_synthetic(&spec, &vocab).unwrap();
    let split = split_train_test(&corpus, 0.7, 2024).unwrap();
    let (xs, ys) = design_matrix(&split.train, &vocab);
    let model = prescreen::train(&xs, &ys, &PrescreenHyperparams::default(), vocab.version()).unwrap().model;
    let result = prescreen::prescreen(&model, &split.test, &vocab).unwrap();
    let (mut kept_sdie, mut sdie, mut dropped_non, mut non) = (0, 0, 0, 0);
    for (e, &keep) in split.test.iter().zip(&result.decisions) {
        if e.raw_label.is_sdie() {
            sdie += 1;
            kept_sdie += usize::from(keep);
        } else {
            non += 1;
            dropped_non += usize::from(!keep);
        }
    }
    let recall = kept_sdie as f64 / sdie as f64;
    let exclusion = dropped_non as f64 / non as f64;
    vec![
        check("size", corpus.len() == 10_000, format!("{} events, {} test", corpus.len(), split.test.len())),
        check("recall", recall >= PRESCREEN_MIN_RECALL, format!("SDIE recall {:.1}% ({kept_sdie}/{sdie})", recall * 100.0)),
        check(
            "exclusion",
            exclusion >= PRESCREEN_MIN_EXCLUSION,
            format!("non-SDIE exclusion {:.1}% ({dropped_non}/{non})", exclusion * 100.0),
        ),
    ]
}

fn stage2_experiment() -> Vec<Check> {
    let vocab = PatternVocabulary::default_sdie();
    let corpus = generate_synthetic(&SyntheticSpec::stage2_acceptance(2024), &vocab).unwrap();
    let examples: Vec<Stage2Example> = corpus
        .iter()
        .filter_map(|e| match map_stage2_label(e.raw_label).unwrap() {
            Stage2Target::Class(c) => Some(Stage2Example::new(e.level2_text.clone(), c)),
            Stage2Target::Excluded => None,
        })
        .collect();
    let counts: Vec<usize> =
        Stage2Class::ORDER.iter().map(|c| examples.iter().filter(|e| e.class == *c).count()).collect();
    let labels: Vec<&str> = examples.iter().map(|e| e.class.as_str()).collect();
    let classes: Vec<&str> = Stage2Class::ORDER.iter().map(|c| c.as_str()).collect();
    let config = Stage2Config::default();
    let outcome = crossval(&labels, &classes, FoldOptions { k: 5, seed: 2024, stratified: true }, true, |_, train, test| {
        let train_set: Vec<Stage2Example> = train.iter().map(|&i| examples[i].clone()).collect();
        let model = train_stage2(&train_set, &config)?;
        let texts: Vec<&str> = test.iter().map(|&i| examples[i].text.as_str()).collect();
        Ok::<_, sdie_core::stage2::Stage2Error>(model.classify_batch(&texts)?.into_iter().map(|p| p.class.as_str().to_string()).collect())
    })
    .unwrap();
    let mut sum = ConfusionMatrix::new(&classes).unwrap();
    for f in &outcome.folds {
        sum.merge(&f.matrix).unwrap();
    }
    vec![
        check("counts", counts == [50, 89, 54, 314], format!("class counts {counts:?}")),
        check(
            "accuracy",
            outcome.report.accuracy >= STAGE2_MIN_ACCURACY,
            format!("accumulated accuracy {:.1}%", outcome.report.accuracy * 100.0),
        ),
        check("sum", sum == outcome.accumulated, "accumulated matrix equals the sum of fold matrices"),
    ]
}

fn cv_invariants() -> Vec<Check> {
    let mut violations = Vec::new();
    for seed in 0..CV_DATASETS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(2..11);
        let n_classes = rng.random_range(1..6);
        let mut labels: Vec<String> = Vec::new();
        for c in 0..n_classes {
            labels.extend(std::iter::repeat_n(format!("C{c}"), rng.random_range(k..k + 60)));
        }
        let stratified = rng.random_bool(0.5);
        let opts = FoldOptions { k, seed: rng.random(), stratified };
        let folds = make_folds(&labels, opts).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        let covering = all == (0..labels.len()).collect::<Vec<_>>();
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        let balanced = sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1;
        let deterministic = make_folds(&labels, opts).unwrap() == folds;
        if folds.len() != k || !covering || !balanced || !deterministic {
            violations.push(seed);
        }
    }
    vec![check(
        "partition",
        violations.is_empty(),
        format!("{CV_DATASETS} datasets; disjoint+covering, sizes within 1, seed-deterministic; violations {violations:?}"),
    )]
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn end_to_end_determinism() -> Vec<Check> {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_sdie");
    let corpus = dir.path().join("corpus.jsonl");
    let synth = Command::new(bin)
        .args(["synth", "--preset", "prescreen", "--seed", "31", "--out"])
        .arg(&corpus)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    let config = dir.path().join("full.json");
    std::fs::write(&config, r#"{"corpus": "corpus.jsonl", "seed": 31}"#).unwrap();
    let run = |out: &str| {
        Command::new(bin)
            .args(["run", "--config"])
            .arg(&config)
            .args(["--output-dir", out])
            .current_dir(dir.path())
            .env("RUST_LOG", "warn")
            .status()
            .unwrap()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ok_runs = synth.success() && run(a.to_str().unwrap()).success() && run(b.to_str().unwrap()).success();
    if !ok_runs {
        return vec![check("runs", false, "a CLI invocation failed")];
    }
    let (fa, fb) = (read_dir_sorted(&a), read_dir_sorted(&b));
    let differing: Vec<&str> =
        fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    let reports = ["prescreen_report.txt", "stage2_report.txt"].iter().all(|r| names.contains(r));
    vec![
        check("reports", reports, "prescreen and four-class reports written"),
        check(
            "identical",
            fa.len() == fb.len() && differing.is_empty(),
            format!("{} artifacts compared, differing: {differing:?}", fa.len()),
        ),
    ]
}
