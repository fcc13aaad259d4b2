use std::collections::HashMap;

use super::params::ParamStore;
use super::{AutodiffError, Result};

/// Default learning rate for every training stage.
pub const DEFAULT_LR: f64 = 0.0005;

/// ADAM with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(DEFAULT_LR)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, (0.9, 0.999), 1e-8)
    }

    pub fn with_betas(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self { lr, beta1: betas.0, beta2: betas.1, eps, step: 0, first: HashMap::new(), second: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates the named parameters from their stored gradients.
    pub fn step<S: AsRef<str>>(&mut self, store: &mut ParamStore, names: &[S]) -> Result<()> {
        for name in names {
            let p = store.get(name.as_ref()).ok_or_else(|| AutodiffError::UnknownParam(name.as_ref().to_string()))?;
            if p.grad.is_none() {
                return Err(AutodiffError::MissingGrad(name.as_ref().to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for name in names {
            let name = name.as_ref();
            let p = store.get_mut(name).expect("checked above");
            let g = p.grad.as_ref().expect("checked above");
            let n = g.len();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let w = p.value.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
