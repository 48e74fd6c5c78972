//! Central-difference gradient verification. Runs in f64 only; the
//! training path stays f32.

use super::scalar::Scalar;
use super::tape::{Grads, NodeId, Tape};
use super::tensor::Tensor;
use crate::nn::params::ParamStore;

pub const FD_STEP: f64 = 1e-5;

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Check analytic gradients of `f` against central finite differences
/// for every scalar in the store. `f` must rebuild the same computation
/// from the current store values each call (including any frozen noise).
/// Returns the maximum relative error observed.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F) -> f64
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> NodeId,
{
    grad_check_detailed(store, f).max_relative_error
}

/// As [`grad_check`], reporting where the worst error lives.
pub fn grad_check_detailed<F>(store: &mut ParamStore<f64>, mut f: F) -> GradCheckReport
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> NodeId,
{
    let analytic: Grads<f64> = {
        let mut tape = Tape::new();
        let root = f(&mut tape, store);
        tape.backward(root, store.len())
    };

    let mut worst = GradCheckReport {
        max_relative_error: 0.0,
        param: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for idx in 0..store.len() {
        for k in 0..store.value(idx).len() {
            let original = store.value(idx).data()[k];

            store.value_mut(idx).data_mut()[k] = original + FD_STEP;
            let plus = eval_scalar(store, &mut f);
            store.value_mut(idx).data_mut()[k] = original - FD_STEP;
            let minus = eval_scalar(store, &mut f);
            store.value_mut(idx).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(idx).map(|g| g.data()[k]).unwrap_or(0.0);
            let err = relative_error(a, numeric);
            if err > worst.max_relative_error {
                worst = GradCheckReport {
                    max_relative_error: err,
                    param: store.name(idx).to_string(),
                    index: k,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    worst
}

fn eval_scalar<F>(store: &mut ParamStore<f64>, f: &mut F) -> f64
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> NodeId,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store);
    tape.scalar_value(root).to_f64()
}

/// Finite-difference check for a plain closure over one flat parameter
/// vector (used for the scalar warm-up cases).
pub fn grad_check_fn(
    params: &mut [f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let original = params[i];
        params[i] = original + FD_STEP;
        let plus = f(params);
        params[i] = original - FD_STEP;
        let minus = f(params);
        params[i] = original;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Build the constant one-hot tensor used throughout the encoders.
pub fn one_hot<S: Scalar>(index: usize, width: usize) -> Tensor<S> {
    let mut data = vec![S::ZERO; width];
    data[index] = S::ONE;
    Tensor::matrix(1, width, data)
}
