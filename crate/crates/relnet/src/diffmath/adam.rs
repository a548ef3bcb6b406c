//! Adam with bias correction, plus global-norm gradient clipping.

use super::array::{Array, Scalar};
use super::params::ParamStore;

/// Per-parameter moment accumulators for Adam.
///
/// Accumulator shapes mirror the parameter store; the step counter strictly
/// increases and drives bias correction.
pub struct AdamState<T> {
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Standard defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_betas(
            store,
            T::from_f64(0.9),
            T::from_f64(0.999),
            T::from_f64(1e-8),
        )
    }

    pub fn with_betas(store: &ParamStore<T>, beta1: T, beta2: T, eps: T) -> Self {
        let zeros: Vec<Array<T>> = store
            .values()
            .iter()
            .map(|p| Array::zeros(p.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected Adam step over every parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Array<T>], lr: T) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for i in 0..grads.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.values_mut()[i].data_mut();
            assert_eq!(g.len(), p.len(), "gradient shape mismatch at index {i}");
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Array<T>], max_norm: T) -> T {
    assert!(max_norm > T::zero(), "max_norm must be positive");
    let sq = grads
        .iter()
        .map(|g| g.data().iter().fold(T::zero(), |acc, &x| acc + x * x))
        .fold(T::zero(), |acc, s| acc + s);
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * scale;
            }
        }
    }
    norm
}
