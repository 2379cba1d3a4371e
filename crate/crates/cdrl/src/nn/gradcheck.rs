//! Central finite-difference verification for layers and whole models.
//!
//! Analytic gradients come from the hand-written backward passes; numeric
//! ones from central differences at f64. Parameter checks clone the model and
//! perturb one scalar at a time, so no layer needs special instrumentation.

use super::layers::Param;
use super::tensor::Tensor;

/// Symmetric relative error with a floor to absorb near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Gradients whose true value is exactly zero (e.g. a conv bias feeding an
/// instance norm) read as pure finite-difference noise; below this magnitude
/// both sides count as zero and agree.
const ZERO_ATOL: f64 = 1e-7;

fn fd_rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < ZERO_ATOL && numeric.abs() < ZERO_ATOL {
        0.0
    } else {
        rel_err(analytic, numeric)
    }
}

/// Central-difference gradient of `f` w.r.t. every element of `x`.
pub fn finite_diff_input_grad(
    x: &Tensor<f64>,
    eps: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let lp = f(&probe);
        probe.data[i] = orig - eps;
        let lm = f(&probe);
        probe.data[i] = orig;
        grad.push((lp - lm) / (2.0 * eps));
    }
    grad
}

/// Anything that exposes its learnable buffers in a stable order.
pub trait HasParams<T: super::tensor::Scalar> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_element_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }
}

/// Indices to probe in a buffer of length `n`: all of them when small,
/// otherwise `limit` evenly spaced ones.
pub fn probe_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        (0..limit).map(|i| i * n / limit).collect()
    }
}

/// Compares analytic parameter gradients (already accumulated by a backward
/// pass and captured per param) against central differences of `loss`.
/// Returns the worst relative error seen.
pub fn max_param_grad_err<M, F>(
    model: &M,
    analytic: &[Vec<f64>],
    eps: f64,
    per_param_limit: usize,
    loss: F,
) -> f64
where
    M: Clone + HasParams<f64>,
    F: Fn(&M) -> f64,
{
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let n_params = probe.params_mut().len();
    assert_eq!(n_params, analytic.len());
    for pi in 0..n_params {
        let len = probe.params_mut()[pi].len();
        for j in probe_indices(len, per_param_limit) {
            let orig = probe.params_mut()[pi].w[j];
            probe.params_mut()[pi].w[j] = orig + eps;
            let lp = loss(&probe);
            probe.params_mut()[pi].w[j] = orig - eps;
            let lm = loss(&probe);
            probe.params_mut()[pi].w[j] = orig;
            let num = (lp - lm) / (2.0 * eps);
            worst = worst.max(fd_rel_err(analytic[pi][j], num));
        }
    }
    worst
}

/// Max relative error between an analytic input gradient and its numeric one.
pub fn max_input_grad_err(
    analytic: &Tensor<f64>,
    x: &Tensor<f64>,
    eps: f64,
    f: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    let numeric = finite_diff_input_grad(x, eps, f);
    analytic
        .data
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| fd_rel_err(a, n))
        .fold(0.0, f64::max)
}
