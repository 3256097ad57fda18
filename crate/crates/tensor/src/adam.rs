use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are allocated lazily to match the store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradient slots of `store`, then zeroes them.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, lr: Real) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.grad.is_finite() {
                return Err(TensorError::Divergence {
                    param: p.name.clone(),
                });
            }
        }
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                value[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
