//! Plain (non-tape) numeric functions: stable softmax, cross entropy,
//! MSE, the closed-form diagonal-Gaussian KL divergence, and the
//! reparameterized sampling used by the latent layer.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::scalar::Scalar;
use crate::rng::normal;

#[derive(Debug, Error, PartialEq)]
pub enum FuncError {
    #[error("sigma must be strictly positive everywhere (offending index {0})")]
    NonPositiveSigma(usize),
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
}

/// Numerically stable softmax (max subtraction).
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    assert!(!logits.is_empty());
    let mut mx = logits[0];
    for &v in logits {
        mx = mx.maximum(v);
    }
    let mut out: Vec<S> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let mut denom = S::ZERO;
    for &e in &out {
        denom += e;
    }
    for e in &mut out {
        *e = *e / denom;
    }
    out
}

/// `-ln p[target]`, with the probability clamped at 1e-12.
pub fn cross_entropy<S: Scalar>(probs: &[S], target: usize) -> S {
    assert!(target < probs.len());
    -probs[target].maximum(S::from_f64(1e-12)).ln()
}

/// Mean squared difference.
pub fn mse<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return S::ZERO;
    }
    let mut acc = S::ZERO;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    acc / S::from_f64(a.len() as f64)
}

/// `KL(N(mu, diag(sigma^2)) || N(0, I))` in closed form:
/// `0.5 * sum_d (mu_d^2 + sigma_d^2 - 2 ln sigma_d - 1)`.
///
/// `sigma` holds standard deviations and must be strictly positive.
pub fn kl_diag_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64, FuncError> {
    if mu.len() != sigma.len() {
        return Err(FuncError::ShapeMismatch(mu.len(), sigma.len()));
    }
    for (i, &s) in sigma.iter().enumerate() {
        if s.is_nan() || s <= 0.0 {
            return Err(FuncError::NonPositiveSigma(i));
        }
    }
    let mut acc = 0.0;
    for (&m, &s) in mu.iter().zip(sigma.iter()) {
        acc += m * m + s * s - 2.0 * s.ln() - 1.0;
    }
    Ok(0.5 * acc)
}

/// `z = mu + sigma . eps` with `eps ~ N(0, noise_var * I)`.
///
/// `noise_var` is a variance; the draw scales a standard normal by its
/// square root. Gradients (when this runs on a tape) flow to `mu` and
/// `sigma` only — here the sampled `eps` is returned so callers can
/// freeze it as a constant.
pub fn reparameterize(
    mu: &[f64],
    sigma: &[f64],
    rng: &mut ChaCha8Rng,
    noise_var: f64,
) -> Vec<f64> {
    assert!(noise_var >= 0.0, "noise variance must be non-negative");
    let scale = noise_var.sqrt();
    mu.iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| m + s * (scale * normal(rng)))
        .collect()
}

/// Draw a `[rows * cols]` matrix of `N(0, noise_var)` samples, row major.
pub fn noise_matrix<S: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    noise_var: f64,
) -> Vec<S> {
    let scale = noise_var.sqrt();
    (0..rows * cols)
        .map(|_| S::from_f64(scale * normal(rng)))
        .collect()
}

pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn softmax_uniform_61() {
        let p = softmax(&[0.0f64; 61]);
        for &v in &p {
            assert!((v - 1.0 / 61.0).abs() < 1e-12);
        }
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[0.1f64, -2.0, 3.5, 0.0]);
        let b = softmax(&[100.1f64, 98.0, 103.5, 100.0]);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_certain_prediction_is_zero() {
        let mut p = vec![0.0f64; 5];
        p[3] = 1.0;
        assert_eq!(cross_entropy(&p, 3), 0.0);
    }

    #[test]
    fn mse_of_identical_slices_is_zero() {
        let a = [0.25f32, 0.5, 0.75];
        assert_eq!(mse(&a, &a), 0.0);
    }

    #[test]
    fn kl_standard_normal_is_zero() {
        let kl = kl_diag_gaussian(&[0.0; 8], &[1.0; 8]).unwrap();
        assert!(kl.abs() < 1e-15);
    }

    #[test]
    fn kl_unit_mean_is_half() {
        let kl = kl_diag_gaussian(&[1.0], &[1.0]).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_non_positive_sigma() {
        assert_eq!(
            kl_diag_gaussian(&[0.0], &[0.0]),
            Err(FuncError::NonPositiveSigma(0))
        );
    }

    #[test]
    fn reparameterize_with_zero_noise_is_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = reparameterize(&[0.3, -1.2], &[2.0, 0.5], &mut rng, 0.0);
        assert_eq!(z, vec![0.3, -1.2]);
    }

    #[test]
    fn reparameterize_is_seed_deterministic() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            reparameterize(&[0.0; 4], &[1.0; 4], &mut rng, 0.01)
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn reparameterize_sample_variance_tracks_noise_var() {
        // mu = 0, sigma = 1, noise_var = 0.01 -> Var(z) = 0.01.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let n = 100_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z = reparameterize(&[0.0], &[1.0], &mut rng, 0.01)[0];
            acc += z;
            acc2 += z * z;
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        assert!((var - 0.01).abs() / 0.01 < 0.05, "sample variance {var}");
    }
}
