//! Adam with bias correction, in dense and row-sparse forms.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("adam: {params} parameters, {grads} gradients, state sized for {state}")]
pub struct AdamShapeError {
    pub params: usize,
    pub grads: usize,
    pub state: usize,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[inline]
fn update(param: &mut f64, g: f64, m: &mut f64, v: &mut f64, cfg: &AdamConfig, c1: f64, c2: f64) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *param -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<(), AdamShapeError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AdamShapeError { params: params.len(), grads: grads.len(), state: state.m.len() });
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        update(&mut params[i], grads[i], &mut state.m[i], &mut state.v[i], cfg, c1, c2);
    }
    Ok(())
}

/// Mutable access to one row of a parameter table.
pub trait RowTable {
    fn row_mut(&mut self, id: usize) -> &mut [f64];
}

impl RowTable for Vec<Vec<f64>> {
    fn row_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self[id]
    }
}

/// Adam over a table of rows where each step touches only a few rows.
///
/// Moments are kept for rows that have received a gradient, and only rows
/// present in the current gradient are updated (lazy Adam). The bias
/// correction uses the global step count shared by the whole table.
#[derive(Debug, Clone, Default)]
pub struct SparseAdamState {
    moments: HashMap<usize, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl SparseAdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Update every row named in `grads`.
    pub fn apply<T: RowTable + ?Sized>(&mut self, grads: &HashMap<usize, Vec<f64>>, table: &mut T, cfg: &AdamConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let g = &grads[&id];
            let params = table.row_mut(id);
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                update(&mut params[i], g[i], &mut m[i], &mut v[i], cfg, c1, c2);
            }
        }
    }
}
