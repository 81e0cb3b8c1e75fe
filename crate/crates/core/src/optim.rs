//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates keyed by parameter.
///
/// Call [`Adam::tick`] once per optimizer step, then [`Adam::update`] for
/// every parameter that takes part in it.
#[derive(Clone, Debug)]
pub struct Adam<K: Ord + Clone> {
    pub config: AdamConfig,
    steps: u64,
    moments: BTreeMap<K, (Vec<f64>, Vec<f64>)>,
}

impl<K: Ord + Clone> Adam<K> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn tick(&mut self) {
        self.steps += 1;
    }

    pub fn update(&mut self, key: &K, param: &mut [f64], grad: &[f64]) {
        assert_eq!(param.len(), grad.len(), "Adam: parameter/gradient length mismatch");
        assert!(self.steps > 0, "Adam::update called before tick");
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let (m, v) = self
            .moments
            .entry(key.clone())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..param.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            param[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let mut p = vec![1.0, -2.0, 3.0];
        opt.tick();
        opt.update(&0u8, &mut p, &[0.5, -4.0, 0.0]);
        // mhat = g, vhat = g^2 after bias correction.
        assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut opt = Adam::new(cfg);
        let mut p = vec![0.0];
        let grads = [1.0, 3.0];
        let (mut m, mut v, mut expect) = (0.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            opt.tick();
            opt.update(&"w", &mut p, &[*g]);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = t as i32 + 1;
            expect -= 0.01 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        assert!((p[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_and_zero_grad_leave_params_bitwise() {
        let mut opt = Adam::new(AdamConfig::with_lr(0.0));
        let mut p = vec![0.3, -0.7];
        opt.tick();
        opt.update(&1u32, &mut p, &[5.0, -1.0]);
        assert_eq!(p, vec![0.3, -0.7]);

        let mut opt = Adam::new(AdamConfig::with_lr(0.5));
        opt.tick();
        opt.update(&1u32, &mut p, &[0.0, 0.0]);
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(AdamConfig::with_lr(-1.0).validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
