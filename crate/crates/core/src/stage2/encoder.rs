//! Text encoders producing fixed-length representations.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::RowTable;
use crate::bridge::BridgeError;
use crate::text::tokenize;

pub const DEFAULT_BUCKETS: usize = 1 << 15;
pub const DEFAULT_DIM: usize = 64;
const DEFAULT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("encoder returned {got} values, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Maps level-2 text to a vector of length [`dim`](Encoder::dim).
pub trait Encoder {
    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError>;

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EncodeError> {
        texts.iter().map(|t| self.encode(t)).collect()
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn init_row(seed: u64, id: usize, dim: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Mean-pooled embedding of hashed, lowercased tokens.
///
/// The table has `buckets x dim` entries. Rows start from a seeded uniform
/// initialization that is recomputed on demand, so only rows that training has
/// changed are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct HashedEmbedding {
    buckets: usize,
    dim: usize,
    seed: u64,
    init_scale: f64,
    rows: HashMap<usize, Vec<f64>>,
}

/// Persisted form of a [`HashedEmbedding`]: its shape, init seed, and the
/// trained rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingState {
    pub buckets: usize,
    pub dim: usize,
    pub seed: u64,
    pub init_scale: f64,
    /// Trained rows sorted by id.
    pub rows: Vec<EmbeddingRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: usize,
    pub values: Vec<f64>,
}

impl HashedEmbedding {
    pub fn new(buckets: usize, dim: usize, seed: u64) -> Self {
        assert!(buckets > 0 && dim > 0, "embedding needs at least one bucket and one dimension");
        Self { buckets, dim, seed, init_scale: DEFAULT_INIT_SCALE, rows: HashMap::new() }
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.to_lowercase().as_bytes()) % self.buckets as u64) as usize
    }

    pub fn bucket_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text).into_iter().map(|t| self.bucket(t.text)).collect()
    }

    pub fn row(&self, id: usize) -> Cow<'_, [f64]> {
        match self.rows.get(&id) {
            Some(r) => Cow::Borrowed(r.as_slice()),
            None => Cow::Owned(init_row(self.seed, id, self.dim, self.init_scale)),
        }
    }

    /// Mean of the rows for `ids`; zero vector when empty.
    pub fn encode_ids(&self, ids: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if ids.is_empty() {
            return out;
        }
        for &id in ids {
            for (o, v) in out.iter_mut().zip(self.row(id).iter()) {
                *o += v;
            }
        }
        let n = ids.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Backpropagate `d_rep` through mean pooling: each occurrence of a bucket
    /// receives `d_rep / len(ids)`.
    pub fn accumulate_grad(&self, ids: &[usize], d_rep: &[f64], grads: &mut HashMap<usize, Vec<f64>>) {
        if ids.is_empty() {
            return;
        }
        let scale = 1.0 / ids.len() as f64;
        for &id in ids {
            let g = grads.entry(id).or_insert_with(|| vec![0.0; self.dim]);
            for (g, d) in g.iter_mut().zip(d_rep) {
                *g += d * scale;
            }
        }
    }

    /// Trained rows, for early-stopping checkpoints.
    pub fn snapshot(&self) -> HashMap<usize, Vec<f64>> {
        self.rows.clone()
    }

    /// Rows absent from the snapshot fall back to their initial values.
    pub fn restore(&mut self, snapshot: HashMap<usize, Vec<f64>>) {
        self.rows = snapshot;
    }

    pub fn to_state(&self) -> EmbeddingState {
        EmbeddingState {
            buckets: self.buckets,
            dim: self.dim,
            seed: self.seed,
            init_scale: self.init_scale,
            rows: self
                .rows
                .iter()
                .map(|(id, v)| (*id, EmbeddingRow { id: *id, values: v.clone() }))
                .collect::<BTreeMap<_, _>>()
                .into_values()
                .collect(),
        }
    }

    pub fn from_state(state: EmbeddingState) -> Result<Self, String> {
        if state.buckets == 0 || state.dim == 0 {
            return Err("embedding shape must be non-zero".into());
        }
        if let Some(r) = state.rows.iter().find(|r| r.id >= state.buckets || r.values.len() != state.dim) {
            return Err(format!("embedding row {} is out of range or has the wrong width", r.id));
        }
        Ok(Self {
            buckets: state.buckets,
            dim: state.dim,
            seed: state.seed,
            init_scale: state.init_scale,
            rows: state.rows.into_iter().map(|r| (r.id, r.values)).collect(),
        })
    }
}

impl RowTable for HashedEmbedding {
    fn row_mut(&mut self, id: usize) -> &mut [f64] {
        let (seed, dim, scale) = (self.seed, self.dim, self.init_scale);
        self.rows.entry(id).or_insert_with(|| init_row(seed, id, dim, scale))
    }
}

impl Encoder for HashedEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError> {
        Ok(self.encode_ids(&self.bucket_ids(text)))
    }
}
