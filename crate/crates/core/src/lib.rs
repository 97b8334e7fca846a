//! Two-stage classification of shutdown initiating events (SDIEs) from
//! free-text plant event reports.
//!
//! Stage one counts a fixed vocabulary of expert-curated SDIE phrases in each
//! report and screens out non-SDIEs with a class-weighted logistic regression.
//! Stage two assigns the surviving reports to one of four event types with an
//! encoder plus dropout/softmax head trained by Adam.
//!
//! Module map:
//! - [`text`]: format cleaning, tokenization, stopwords and stemming
//! - [`corpus`]: event records, ingest, label mapping, train/test splits
//! - [`patterns`]: the pattern vocabulary and count vectorization
//! - [`prescreen`]: stage-one logistic regression
//! - [`stage2`]: encoder, classification head, Adam, fold training
//! - [`bridge`]: stdio client for an out-of-process pretrained encoder
//! - [`eval`]: confusion matrices, metrics, k-fold cross-validation, tables
//! - [`synth`]: seeded synthetic corpus generator
//! - [`pipeline`]: end-to-end orchestration and artifact writing

pub mod bridge;
pub mod corpus;
pub mod eval;
pub mod patterns;
pub mod pipeline;
pub mod prescreen;
pub mod stage2;
pub mod synth;
pub mod text;

pub use corpus::{Corpus, EventRecord, RawLabel, Stage2Class, Stage2Target};
pub use patterns::{FeatureVector, PatternVocabulary};
pub use prescreen::{PrescreenHyperparams, PrescreenModel};
