//! Bias-corrected Adam.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamState<T> {
    cfg: AdamConfig,
    step: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        assert!(cfg.lr > 0.0, "lr must be positive");
        AdamState { cfg, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One update over every (param, grad) pair. A non-finite gradient
    /// rejects the whole step before any parameter is touched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, grad) in grads {
            if !grad.all_finite() {
                return Err(CoreError::NonFiniteGrad(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::f(self.cfg.beta1);
        let b2 = T::f(self.cfg.beta2);
        let lr = T::f(self.cfg.lr);
        let eps = T::f(self.cfg.eps);
        let bc1 = T::one() - T::f(self.cfg.beta1.powi(t));
        let bc2 = T::one() - T::f(self.cfg.beta2.powi(t));

        for (name, grad) in grads {
            let param = params.get_mut(name);
            assert_eq!(param.shape(), grad.shape(), "grad shape for `{name}`");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            for i in 0..grad.numel() {
                let gi = grad.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                param.data_mut()[i] = param.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut IndexMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.to64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::f(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}
