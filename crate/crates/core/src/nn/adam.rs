use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{NnError, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name and
/// created lazily; frozen parameters are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter of `modules` from its
    /// accumulated gradient. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, modules: &mut [&mut dyn Parameterized]) -> Result<(), NnError> {
        let mut bad = None;
        for m in modules.iter() {
            m.visit(&mut |p| {
                if bad.is_none() && p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                    bad = Some(p.name().to_string());
                }
            });
        }
        if let Some(name) = bad {
            return Err(NnError::NonFiniteGradient(name));
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for m in modules.iter_mut() {
            m.visit_mut(&mut |p| {
                let Some(g) = p.grad().cloned() else { return };
                let (mom1, mom2) = self
                    .moments
                    .entry(p.name().to_string())
                    .or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())));
                Zip::from(&mut p.value).and(mom1).and(mom2).and(&g).for_each(|w, m1, m2, &gi| {
                    *m1 = beta1 * *m1 + (1.0 - beta1) * gi;
                    *m2 = beta2 * *m2 + (1.0 - beta2) * gi * gi;
                    let m_hat = *m1 / c1;
                    let v_hat = *m2 / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
            });
        }
        Ok(())
    }
}
