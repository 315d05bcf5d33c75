//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::tensor::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lr", self.lr, self.lr > 0.0),
            ("beta1", self.beta1, self.beta1 > 0.0 && self.beta1 < 1.0),
            ("beta2", self.beta2, self.beta2 > 0.0 && self.beta2 < 1.0),
            ("eps", self.eps, self.eps > 0.0),
        ];
        for (name, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(Error::Hyperparameter { name, value });
            }
        }
        Ok(())
    }
}

/// Per-parameter first and second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    /// Rebuilds an optimizer from stored moments (checkpoint restore).
    pub fn from_parts(config: AdamConfig, moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let mut adam = Self::new(config)?;
        for (name, (m, v)) in moments {
            if m.len() != v.len() {
                return Err(Error::Checkpoint(format!("moment length mismatch for `{name}`")));
            }
            adam.first.insert(name.clone(), m);
            adam.second.insert(name, v);
        }
        Ok(adam)
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// `(name, first moment, second moment)` in name order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.first
            .iter()
            .zip(&self.second)
            .map(|((n, m), (_, v))| (n.as_str(), m.as_slice(), v.as_slice()))
    }

    /// Applies one update to every parameter, then clears gradients and
    /// increments the set's step counter. Fails without touching anything if
    /// any parameter lacks a gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(Error::MissingGrad { name: name.to_string() });
            }
            if let Some(m) = self.first.get(name) {
                if m.len() != t.numel() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        detail: format!("moment for `{name}` has {} entries, parameter has {}", m.len(), t.numel()),
                    });
                }
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = params.step_count() as i32 + 1;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let grad = p.grad().expect("checked above").to_vec();
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.zero_grad();
        }
        params.increment_step();
        Ok(())
    }
}
