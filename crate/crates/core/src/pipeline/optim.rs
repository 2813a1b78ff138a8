use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, ParamStore};
use crate::error::{EmoqError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(EmoqError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay. Only trainable parameters are touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Mat, Mat)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Mat>) -> Result<f64> {
        let trainable: Vec<(&String, &Mat)> = grads
            .iter()
            .filter(|(name, _)| store.get(name).map(|p| p.trainable).unwrap_or(false))
            .collect();
        let norm = trainable
            .iter()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(EmoqError::Numeric(format!("gradient norm is {norm}")));
        }
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, grad) in trainable {
            let param = store.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Mat::zeros(grad.dim()), Mat::zeros(grad.dim())));
            ndarray::Zip::from(&mut param.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bias1) / ((*v / bias2).sqrt() + c.eps);
                    *p -= c.learning_rate * (update + c.weight_decay * *p);
                });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("w", array![[1.0, -2.0]], true);
        store.insert("frozen", array![[3.0]], false);
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..AdamWConfig::default()
        });
        let grads = BTreeMap::from([("w".to_string(), array![[0.5, -4.0]]), ("frozen".to_string(), array![[1.0]])]);
        opt.step(&mut store, &grads).unwrap();
        let w = store.value("w").unwrap();
        // Bias-corrected first step is sign(g) * lr (up to eps).
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-6);
        assert_eq!(store.value("frozen").unwrap()[[0, 0]], 3.0);
    }

    #[test]
    fn clipping_and_decay() {
        let mut store = ParamStore::new();
        store.insert("w", array![[2.0]], true);
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            grad_clip: 1.0,
            ..AdamWConfig::default()
        });
        let norm = opt.step(&mut store, &BTreeMap::from([("w".to_string(), array![[0.0]])])).unwrap();
        assert_eq!(norm, 0.0);
        assert!((store.value("w").unwrap()[[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
        let norm = opt
            .step(&mut store, &BTreeMap::from([("w".to_string(), array![[f64::NAN]])]))
            .unwrap_err();
        assert_eq!(norm.exit_code(), 4);
    }
}
