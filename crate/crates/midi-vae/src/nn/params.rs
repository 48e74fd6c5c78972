//! Named parameter storage with per-parameter ADAM state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use super::scalar::Scalar;
use super::tape::Grads;
use super::tensor::Tensor;
use crate::rng::normal;

/// All trainable tensors of a model, in a stable registration order.
/// ADAM moments live alongside each entry so an optimizer step is just
/// `store.adam_step(&grads, lr)`.
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, usize>,
}

struct ParamEntry<S> {
    name: String,
    value: Tensor<S>,
    m: Tensor<S>,
    v: Tensor<S>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.entries.len();
        let shape = value.shape().to_vec();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            value,
            step: 0,
        });
        self.by_name.insert(name.to_string(), idx);
        idx
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn value(&self, idx: usize) -> &Tensor<S> {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<S> {
        &mut self.entries[idx].value
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Iterate `(name, tensor)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Bias-corrected ADAM update. Entries without a gradient are left
    /// untouched (their moments and step counters do not advance).
    pub fn adam_step(&mut self, grads: &Grads<S>, lr: f64) {
        self.adam_step_with(grads, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    }

    pub fn adam_step_with(&mut self, grads: &Grads<S>, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        let b1 = S::from_f64(beta1);
        let b2 = S::from_f64(beta2);
        let lr = S::from_f64(lr);
        let eps = S::from_f64(eps);
        for (idx, entry) in self.entries.iter_mut().enumerate() {
            let g = match grads.get(idx) {
                Some(g) => g,
                None => continue,
            };
            assert_eq!(
                g.shape(),
                entry.value.shape(),
                "gradient shape mismatch for {}",
                entry.name
            );
            entry.step += 1;
            let corr1 = S::ONE - S::from_f64(beta1.powi(entry.step as i32));
            let corr2 = S::ONE - S::from_f64(beta2.powi(entry.step as i32));
            for (((p, m), v), &gi) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(entry.m.data_mut())
                .zip(entry.v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (S::ONE - b1) * gi;
                *v = b2 * *v + (S::ONE - b2) * gi * gi;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Convert the whole store to another precision, dropping optimizer
    /// state (used to lift f32 checkpoints into f64 gradient checks).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.register(&e.name, e.value.cast());
        }
        out
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform init in `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<S> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.gen_range(-s..s)))
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Random square orthogonal matrix via modified Gram-Schmidt on a
/// Gaussian draw. Used for recurrent weight matrices.
pub fn orthogonal<S: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Tensor<S> {
    let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| normal(rng)).collect()).collect();
    for i in 0..n {
        let (done, rest) = rows.split_at_mut(i);
        let row = &mut rest[0];
        for prev in done.iter() {
            let dot: f64 = row.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            for (r, p) in row.iter_mut().zip(prev.iter()) {
                *r -= dot * p;
            }
        }
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        // A zero-norm row after projection is probability zero; guard anyway.
        let inv = if norm > 1e-12 { 1.0 / norm } else { 1.0 };
        for r in row.iter_mut() {
            *r *= inv;
        }
    }
    let data = rows
        .into_iter()
        .flatten()
        .map(S::from_f64)
        .collect::<Vec<_>>();
    Tensor::matrix(n, n, data)
}

pub fn zeros_vector<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::zeros(vec![n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use rand::SeedableRng;

    #[test]
    fn adam_identity_on_zero_gradient() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let idx = store.register("w", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(idx, store.value(idx).clone());
        let z = tape.scale(p, 0.0);
        let loss = tape.mean_all(z);
        let grads = tape.backward(loss, store.len());
        store.adam_step(&grads, 0.1);
        assert_eq!(store.value(idx).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr_for_unit_gradient() {
        // With g = 1 the bias-corrected ratio m_hat / sqrt(v_hat) is exactly 1,
        // so the very first update moves the parameter by ~lr.
        let mut store: ParamStore<f64> = ParamStore::new();
        let idx = store.register("w", Tensor::scalar(5.0));
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(idx, store.value(idx).clone());
        let loss = tape.mean_all(p); // d loss / d p = 1
        let grads = tape.backward(loss, store.len());
        store.adam_step(&grads, 0.01);
        let moved = 5.0 - store.value(idx).data()[0];
        assert!((moved - 0.01).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q: Tensor<f64> = orthogonal(&mut rng, 16);
        for i in 0..16 {
            for j in 0..16 {
                let dot: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "({i},{j}) -> {dot}");
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_updates() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store: ParamStore<f32> = ParamStore::new();
            let idx = store.register("w", glorot_uniform(&mut rng, 4, 4));
            for _ in 0..5 {
                let mut tape: Tape<f32> = Tape::new();
                let p = tape.param(idx, store.value(idx).clone());
                let sq = tape.mul(p, p);
                let loss = tape.mean_all(sq);
                let grads = tape.backward(loss, store.len());
                store.adam_step(&grads, 0.05);
            }
            store.value(idx).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
