use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.optimizer.lr", format!("must be > 0, got {}", self.lr)));
        }
        for (f, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("train.optimizer.{f}"), "must be in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.optimizer.eps", "must be > 0"));
        }
        Ok(())
    }
}

/// Adam with bias correction, or plain SGD. State is keyed by parameter
/// name, so layers may be added or removed between models of a sweep.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Element> {
    config: OptimizerConfig,
    step: u64,
    moments: HashMap<(String, bool), (Vec<T>, Vec<T>)>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: HashMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients come from `tracked`, a copy of `params`
    /// registered on the tape that just ran backward; parameters that took
    /// no part in the loss get a zero gradient.
    pub fn update(&mut self, params: &ParamSet<T>, tracked: &ParamSet<T>) -> Result<ParamSet<T>> {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let lr = T::of(c.lr);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powf(t));
        let corr2 = T::of(1.0 - c.beta2.powf(t));
        let eps = T::of(c.eps);
        params.map(|name, is_bias, value| {
            let p = tracked.get(name)?;
            let src = if is_bias { &p.bias } else { &p.weights };
            let grad = src.grad().unwrap_or_else(|| vec![T::zero(); value.numel()]);
            let mut next = value.to_vec();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in next.iter_mut().zip(&grad) {
                        *x -= lr * *g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry((name.to_string(), is_bias))
                        .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
                    for i in 0..next.len() {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        let mh = m[i] / corr1;
                        let vh = v[i] / corr2;
                        next[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            crate::tensor::Tensor::from_vec(value.dims(), next)
        })
    }
}
