//! Dropout + linear + softmax classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 4;

/// Floor applied to softmax outputs before renormalizing.
pub const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HeadError {
    #[error("representation has {got} values, head expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("class index {0} out of range")]
    InvalidClass(usize),
    #[error("dropout rate {0} must be in [0, 1)")]
    InvalidDropout(f64),
    #[error("head has {got} weights, expected {expected}")]
    BadShape { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Eval,
    /// Inverted dropout with masks drawn from a generator seeded by `seed`.
    Train { seed: u64 },
}

/// `weights` is row-major `dim x NUM_CLASSES`: `weights[i * 4 + k]` connects
/// input unit `i` to class `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationHead {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub logits: [f64; NUM_CLASSES],
    pub probs: [f64; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub d_weights: Vec<f64>,
    pub d_bias: Vec<f64>,
    /// Gradient of the mean loss with respect to each input representation.
    pub d_inputs: Vec<Vec<f64>>,
}

/// Softmax with max-subtraction, floored and renormalized so every entry is
/// strictly positive.
pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.map(|z| (z - max).exp());
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v = (*v / sum).max(PROB_FLOOR));
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

fn log_softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.map(|z| z - lse)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverted dropout mask: each unit is `0` with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(dim: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; dim];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..dim).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

impl ClassificationHead {
    /// Xavier-uniform weights, zero bias.
    pub fn new(dim: usize, dropout_rate: f64, seed: u64) -> Result<Self, HeadError> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(HeadError::InvalidDropout(dropout_rate));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (6.0 / (dim + NUM_CLASSES) as f64).sqrt();
        let weights = (0..dim * NUM_CLASSES).map(|_| rng.random_range(-limit..limit)).collect();
        Ok(Self { dim, weights, bias: vec![0.0; NUM_CLASSES], dropout_rate })
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if self.weights.len() != self.dim * NUM_CLASSES {
            return Err(HeadError::BadShape { expected: self.dim * NUM_CLASSES, got: self.weights.len() });
        }
        if self.bias.len() != NUM_CLASSES {
            return Err(HeadError::BadShape { expected: NUM_CLASSES, got: self.bias.len() });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(HeadError::InvalidDropout(self.dropout_rate));
        }
        Ok(())
    }

    fn check(&self, r: &[f64]) -> Result<(), HeadError> {
        if r.len() != self.dim {
            return Err(HeadError::DimensionMismatch { expected: self.dim, got: r.len() });
        }
        Ok(())
    }

    fn logits(&self, h: &[f64]) -> [f64; NUM_CLASSES] {
        let mut z = [0.0; NUM_CLASSES];
        z.copy_from_slice(&self.bias);
        for (i, hi) in h.iter().enumerate() {
            if *hi == 0.0 {
                continue;
            }
            let row = &self.weights[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
            for k in 0..NUM_CLASSES {
                z[k] += hi * row[k];
            }
        }
        z
    }

    fn masked(&self, r: &[f64], rng: Option<&mut ChaCha8Rng>) -> (Vec<f64>, Option<Vec<f64>>) {
        match rng {
            None => (r.to_vec(), None),
            Some(rng) => {
                let mask = dropout_mask(self.dim, self.dropout_rate, rng);
                (r.iter().zip(&mask).map(|(a, m)| a * m).collect(), Some(mask))
            }
        }
    }

    pub fn forward(&self, r: &[f64], mode: HeadMode) -> Result<HeadOutput, HeadError> {
        self.check(r)?;
        let mut rng = match mode {
            HeadMode::Eval => None,
            HeadMode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        let (h, _) = self.masked(r, rng.as_mut());
        let logits = self.logits(&h);
        Ok(HeadOutput { logits, probs: softmax(&logits) })
    }

    /// Mean cross-entropy and its gradients over `(representation, class)`
    /// pairs. In train mode one generator seeded by `seed` supplies the masks
    /// for the samples in order.
    pub fn loss_and_grad(&self, batch: &[(&[f64], usize)], mode: HeadMode) -> Result<HeadGradients, HeadError> {
        if batch.is_empty() {
            return Err(HeadError::EmptyBatch);
        }
        let mut rng = match mode {
            HeadMode::Eval => None,
            HeadMode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut d_weights = vec![0.0; self.weights.len()];
        let mut d_bias = vec![0.0; NUM_CLASSES];
        let mut d_inputs = Vec::with_capacity(batch.len());
        for (r, y) in batch {
            self.check(r)?;
            if *y >= NUM_CLASSES {
                return Err(HeadError::InvalidClass(*y));
            }
            let (h, mask) = self.masked(r, rng.as_mut());
            let logits = self.logits(&h);
            loss -= log_softmax(&logits)[*y];
            let mut dz = softmax(&logits);
            dz[*y] -= 1.0;
            dz.iter_mut().for_each(|v| *v /= n);
            for k in 0..NUM_CLASSES {
                d_bias[k] += dz[k];
            }
            let mut d_r = vec![0.0; self.dim];
            for i in 0..self.dim {
                let row = &self.weights[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
                let drow = &mut d_weights[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
                let mut acc = 0.0;
                for k in 0..NUM_CLASSES {
                    drow[k] += h[i] * dz[k];
                    acc += row[k] * dz[k];
                }
                d_r[i] = match &mask {
                    Some(m) => acc * m[i],
                    None => acc,
                };
            }
            d_inputs.push(d_r);
        }
        Ok(HeadGradients { loss: loss / n, d_weights, d_bias, d_inputs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(dim: usize) -> ClassificationHead {
        ClassificationHead::new(dim, 0.3, 7).unwrap()
    }

    fn mean_loss(h: &ClassificationHead, batch: &[(&[f64], usize)], mode: HeadMode) -> f64 {
        h.loss_and_grad(batch, mode).unwrap().loss
    }

    #[test]
    fn softmax_is_a_distribution() {
        for z in [[0.0; 4], [1000.0, -1000.0, 0.0, 3.0], [-5.0, -5.0, -5.0, -4.0]] {
            let p = softmax(&z);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax(&[0.1, 0.2, 0.3, 0.4]), 3);
    }

    #[test]
    fn eval_forward_ignores_dropout() {
        let h = head(6);
        let r = [0.5, -0.2, 0.1, 0.9, -0.7, 0.3];
        assert_eq!(h.forward(&r, HeadMode::Eval).unwrap(), h.forward(&r, HeadMode::Eval).unwrap());
        let train = h.forward(&r, HeadMode::Train { seed: 1 }).unwrap();
        assert_eq!(train, h.forward(&r, HeadMode::Train { seed: 1 }).unwrap());
    }

    #[test]
    fn dropout_mask_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mask = dropout_mask(n, 0.3, &mut rng);
        let mean = mask.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let zeros = mask.iter().filter(|m| **m == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.3).abs() < 0.01);
    }

    #[test]
    fn dropout_outputs_match_eval_in_expectation() {
        let h = head(16);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r: Vec<f64> = (0..16).map(|_| rng.random_range(0.2..1.0) * if rng.random() { 1.0 } else { -1.0 }).collect();
        let (eval, _) = h.masked(&r, None);
        let mut mean = vec![0.0; 16];
        let n = 10_000;
        for _ in 0..n {
            let (train, _) = h.masked(&r, Some(&mut rng));
            for (m, t) in mean.iter_mut().zip(&train) {
                *m += t / n as f64;
            }
        }
        for (i, (m, e)) in mean.iter().zip(&eval).enumerate() {
            assert!((m - e).abs() / e.abs() < 0.02, "unit {i}: {m} vs {e}");
        }
    }

    #[test]
    fn shifting_logits_keeps_the_argmax() {
        for z in [[0.1, 2.0, -1.0, 0.5], [3.0, 3.0, 1.0, 0.0], [-2.0, -1.0, -1.0, -3.0]] {
            let base = argmax(&softmax(&z));
            for c in [-100.0, -1.0, 0.5, 250.0] {
                assert_eq!(argmax(&softmax(&z.map(|v| v + c))), base);
            }
        }
        assert_eq!(argmax(&[0.1, 0.2, 0.6, 0.1]), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let h = head(3);
        assert!(matches!(h.forward(&[1.0], HeadMode::Eval), Err(HeadError::DimensionMismatch { .. })));
        assert_eq!(h.loss_and_grad(&[], HeadMode::Eval), Err(HeadError::EmptyBatch));
        let r = [0.0; 3];
        assert_eq!(h.loss_and_grad(&[(&r, 4)], HeadMode::Eval), Err(HeadError::InvalidClass(4)));
        assert!(ClassificationHead::new(3, 1.0, 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = head(5);
        let r1 = [0.3, -0.1, 0.8, 0.05, -0.4];
        let r2 = [-0.6, 0.2, 0.1, 0.7, 0.0];
        let batch: Vec<(&[f64], usize)> = vec![(&r1, 2), (&r2, 0)];
        for mode in [HeadMode::Eval, HeadMode::Train { seed: 11 }] {
            let g = h.loss_and_grad(&batch, mode).unwrap();
            let eps = 1e-6;
            for j in 0..h.weights.len() {
                let (mut hp, mut hm) = (h.clone(), h.clone());
                hp.weights[j] += eps;
                hm.weights[j] -= eps;
                let fd = (mean_loss(&hp, &batch, mode) - mean_loss(&hm, &batch, mode)) / (2.0 * eps);
                assert!((fd - g.d_weights[j]).abs() < 1e-7, "w{j}: {fd} vs {}", g.d_weights[j]);
            }
            for k in 0..NUM_CLASSES {
                let (mut hp, mut hm) = (h.clone(), h.clone());
                hp.bias[k] += eps;
                hm.bias[k] -= eps;
                let fd = (mean_loss(&hp, &batch, mode) - mean_loss(&hm, &batch, mode)) / (2.0 * eps);
                assert!((fd - g.d_bias[k]).abs() < 1e-7);
            }
            for i in 0..5 {
                let (mut p, mut m) = (r1, r1);
                p[i] += eps;
                m[i] -= eps;
                let bp: Vec<(&[f64], usize)> = vec![(&p, 2), (&r2, 0)];
                let bm: Vec<(&[f64], usize)> = vec![(&m, 2), (&r2, 0)];
                let fd = (mean_loss(&h, &bp, mode) - mean_loss(&h, &bm, mode)) / (2.0 * eps);
                assert!((fd - g.d_inputs[0][i]).abs() < 1e-7);
            }
        }
    }
}
