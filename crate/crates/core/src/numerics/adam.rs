//! Adam with bias correction and decoupled weight decay.
//!
//! For each parameter `p` with gradient `g` at step `t` (1-based):
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! p ← p − lr·√(1 − β2ᵗ)/(1 − β1ᵗ) · m/(√v + ε)
//! ```
//!
//! The bias corrections are folded into the step size, so `ε` is added to
//! the uncorrected `√v`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::Tensor;

/// Named parameter tensors, iterated in lexicographic name order.
pub type ParamStore = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.m.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.v.as_slice())
    }

    /// One optimizer step. Parameters without an entry in `grads` are
    /// frozen: neither decayed nor updated.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            if !p.same_dims(g) {
                return Err(Error::Shape(format!(
                    "parameter {name} has dims {:?}, gradient {:?}",
                    p.dims(),
                    g.dims()
                )));
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let step_size = lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));

        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            if mom.m.len() != g.len() {
                return Err(Error::Shape(format!("moment size changed for {name}")));
            }
            for (((pv, &gv), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *pv -= lr * weight_decay * *pv;
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                *pv -= step_size * *m / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[(&str, Vec<f64>)]) -> ParamStore {
        values
            .iter()
            .map(|(n, v)| (n.to_string(), Tensor::vector(v.clone())))
            .collect()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = store(&[("w", vec![1.0, -2.0, 3.0])]);
        let before = params.clone();
        let grads = store(&[("w", vec![0.0; 3])]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut params, &grads, 1e-3, 0.0).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.first_moment("w").unwrap(), &[0.0; 3]);
        assert_eq!(adam.second_moment("w").unwrap(), &[0.0; 3]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude() {
        let cfg = AdamConfig::default();
        for &g in &[0.3, -2.5, 1e-3] {
            let mut params = store(&[("w", vec![0.5])]);
            let grads = store(&[("w", vec![g])]);
            let mut adam = AdamState::new(cfg);
            let lr = 1e-3;
            adam.step(&mut params, &grads, lr, 0.0).unwrap();
            let moved = (params["w"].data()[0] - 0.5).abs();
            let expected = lr * g.abs() / (g.abs() + cfg.eps * (1.0 / (1.0 - cfg.beta2)).sqrt());
            assert!((moved - expected).abs() <= 1e-15, "{moved} vs {expected}");
            assert!((moved - lr).abs() <= 1e-3 * lr);
        }
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let (lr, wd, g, p0) = (0.01, 0.1, 0.7, 2.0);

        // hand-unrolled
        let mut p = p0;
        p -= lr * wd * p;
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        p -= lr * (1.0 - b2).sqrt() / (1.0 - b1) * m1 / (v1.sqrt() + eps);
        p -= lr * wd * p;
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        p -= lr * (1.0 - b2 * b2).sqrt() / (1.0 - b1 * b1) * m2 / (v2.sqrt() + eps);

        let mut params = store(&[("w", vec![p0])]);
        let grads = store(&[("w", vec![g])]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut params, &grads, lr, wd).unwrap();
        adam.step(&mut params, &grads, lr, wd).unwrap();
        assert!((params["w"].data()[0] - p).abs() <= 1e-12);
        assert!((adam.first_moment("w").unwrap()[0] - m2).abs() <= 1e-15);
    }

    #[test]
    fn non_positive_lr_is_config_error() {
        let mut params = store(&[("w", vec![1.0])]);
        let grads = store(&[("w", vec![1.0])]);
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(matches!(
            adam.step(&mut params, &grads, 0.0, 0.0),
            Err(Error::Config(_))
        ));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut params = store(&[("a", vec![1.0]), ("b", vec![1.0])]);
        let grads = store(&[("a", vec![1.0])]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut params, &grads, 0.1, 0.5).unwrap();
        assert_eq!(params["b"].data(), &[1.0]);
        assert!(adam.first_moment("b").is_none());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = store(&[("w", vec![1.0, 2.0])]);
        let grads = store(&[("w", vec![1.0])]);
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(matches!(
            adam.step(&mut params, &grads, 0.1, 0.0),
            Err(Error::Shape(_))
        ));
    }
}
