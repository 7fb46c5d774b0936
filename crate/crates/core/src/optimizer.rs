//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Array,
    second: Array,
}

/// Optimizer state. Moments are created lazily on the first step a
/// parameter appears in and are matched by key afterwards, so registration
/// order never matters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<K: Ord + Clone> {
    pub config: AdamConfig,
    pub step_count: u64,
    moments: BTreeMap<K, Moments>,
}

impl<K: Ord + Clone + std::fmt::Display> AdamState<K> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One Adam update. `params` pairs each key with its value and gradient.
    ///
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut [(K, &mut Array, &Array)], batch_index: usize) -> Result<()> {
        for (key, value, grad) in params.iter() {
            if value.shape() != grad.shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape {:?} != parameter shape {:?} for {key}",
                    grad.shape(),
                    value.shape()
                )));
            }
            if !grad.is_finite() {
                return Err(Error::NonFiniteGradient {
                    batch_index,
                    param: key.to_string(),
                });
            }
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = params
                    .iter()
                    .flat_map(|(_, _, g)| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step_count += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (key, value, grad) in params.iter_mut() {
            let m = self.moments.entry(key.clone()).or_insert_with(|| Moments {
                first: value.zeros_like(),
                second: value.zeros_like(),
            });
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.first.data_mut().iter_mut().zip(m.second.data_mut()));
            for ((p, &g), (m1, m2)) in it {
                let g = g * clip;
                *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                let m_hat = *m1 / bc1;
                let v_hat = *m2 / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
