use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One AdamW update of every parameter that has a gradient in `grads`.
/// Weight decay is decoupled: `θ ← θ - lr·wd·θ` before the moment update is
/// applied, and only for parameters flagged for decay.
pub fn adamw_step(store: &mut ParamStore, grads: &HashMap<ParamId, Vec<f64>>, hp: &AdamWConfig) {
    let mut ids: Vec<&ParamId> = grads.keys().collect();
    ids.sort();
    for &id in ids {
        let g = &grads[&id];
        let p = store.get_mut(id);
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        let decay = if p.decay { hp.lr * hp.weight_decay } else { 0.0 };
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let gi = g[i];
            p.first_moment[i] = hp.beta1 * p.first_moment[i] + (1.0 - hp.beta1) * gi;
            p.second_moment[i] = hp.beta2 * p.second_moment[i] + (1.0 - hp.beta2) * gi * gi;
            let m_hat = p.first_moment[i] / bc1;
            let v_hat = p.second_moment[i] / bc2;
            values[i] -= decay * values[i];
            values[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Relative improvement needed to reset patience.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 10,
            min_lr: 1e-6,
            threshold: 1e-4,
        }
    }
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs pass without the training loss beating its best by `threshold`
/// (relative).
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        Self {
            cfg,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.cfg.threshold) || self.best.is_infinite() {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying a whole loss history.
pub fn plateau_lr(history: &[f64], lr: f64, cfg: PlateauConfig) -> f64 {
    let mut s = PlateauScheduler::new(lr, cfg);
    for &l in history {
        s.step(l);
    }
    s.lr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn one_param(v: Vec<f64>, decay: bool) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = v.len();
        let id = s.add("w", Tensor::new(vec![n], v).unwrap(), decay).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let (mut s, id) = one_param(vec![1.0, -2.0, 3.0], true);
        let hp = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let grads = HashMap::from([(id, vec![0.0; 3])]);
        adamw_step(&mut s, &grads, &hp);
        assert_eq!(s.value(id).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn single_step_closed_form() {
        let (mut s, id) = one_param(vec![0.5, 0.5, 0.5], false);
        let hp = AdamWConfig::default();
        let g = vec![0.3, -2.0, 1e-3];
        adamw_step(&mut s, &HashMap::from([(id, g.clone())]), &hp);
        for (i, gi) in g.iter().enumerate() {
            // m̂ = g, v̂ = g² after bias correction
            let want = 0.5 - hp.lr * gi / (gi.abs() + hp.eps);
            assert!((s.value(id).data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let (mut s, id) = one_param(vec![2.0], true);
        let hp = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        for _ in 0..3 {
            adamw_step(&mut s, &HashMap::from([(id, vec![0.0])]), &hp);
        }
        assert!((s.value(id).data()[0] - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (mut s, id) = one_param(vec![1.0, 2.0], true);
        let hp = AdamWConfig { lr: 0.0, ..Default::default() };
        adamw_step(&mut s, &HashMap::from([(id, vec![5.0, -1.0])]), &hp);
        assert_eq!(s.value(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn plateau_contracts() {
        let cfg = PlateauConfig::default();
        let decreasing: Vec<f64> = (0..50).map(|i| 10.0 * 0.9f64.powi(i)).collect();
        assert_eq!(plateau_lr(&decreasing, 1e-3, cfg), 1e-3);
        assert_eq!(plateau_lr(&[1.0; 11], 1e-3, cfg), 5e-4);
        let mut two = vec![1.0; 12];
        two.extend(vec![0.5; 12]);
        assert_eq!(plateau_lr(&two, 1e-3, cfg), 2.5e-4);
    }

    #[test]
    fn plateau_is_monotone_and_floored() {
        let cfg = PlateauConfig::default();
        let mut s = PlateauScheduler::new(1e-5, cfg);
        let mut last = s.lr();
        for _ in 0..200 {
            let lr = s.step(1.0);
            assert!(lr <= last);
            last = lr;
        }
        assert_eq!(last, 1e-6);
    }
}
