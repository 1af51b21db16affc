use super::param::ParamStore;
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Adam with bias correction. Weight decay is an L2 term folded into the
/// gradient before the moment updates.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that holds a gradient; parameters whose grad is
    /// absent are left untouched (their moments do not decay either).
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, weight_decay: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Parameter(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        if store.len() != self.first.len() {
            return Err(Error::Usage("optimizer state does not match parameter store".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let correct1 = T::c(1.0 - beta1.powi(t));
        let correct2 = T::c(1.0 - beta2.powi(t));
        let (b1, b2) = (T::c(beta1), T::c(beta2));
        let (one_b1, one_b2) = (T::c(1.0 - beta1), T::c(1.0 - beta2));
        let (lr, wd, eps) = (T::c(lr), T::c(weight_decay), T::c(eps));

        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(grad) = p.tensor.grad.take() else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j] + wd * *w;
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let m_hat = m[j] / correct1;
                let v_hat = v[j] / correct2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}
