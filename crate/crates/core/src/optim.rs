//! AdamW with bias-corrected moments and decoupled weight decay, restricted to a trainable set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelState, TrainableSet};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub first: Vec<F>,
    pub second: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    /// One entry per trainable parameter name.
    pub moments: BTreeMap<String, Moments<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(config: AdamWConfig, model: &ModelState<F>, trainable: &TrainableSet) -> Self {
        let moments = model
            .params
            .iter()
            .filter(|p| trainable.contains(&p.name))
            .map(|p| {
                (
                    p.name.clone(),
                    Moments {
                        first: vec![F::zero(); p.len()],
                        second: vec![F::zero(); p.len()],
                    },
                )
            })
            .collect();
        OptimizerState {
            config,
            step: 0,
            moments,
        }
    }

    /// One AdamW step over the trainable set; other parameters are not touched.
    pub fn apply(&mut self, model: &mut ModelState<F>, grads: &Gradients<F>, trainable: &TrainableSet) -> Result<()> {
        for (i, p) in model.params.iter().enumerate() {
            if trainable.mask.get(i).copied().unwrap_or(false) {
                if grads.grads.get(i).and_then(|g| g.as_ref()).is_none() {
                    return Err(Error::Consistency(format!("no gradient for trainable parameter `{}`", p.name)));
                }
                if !self.moments.contains_key(&p.name) {
                    return Err(Error::Consistency(format!("no optimizer moments for `{}`", p.name)));
                }
            }
        }
        self.step += 1;
        for (i, p) in model.params.iter_mut().enumerate() {
            if !trainable.mask[i] {
                continue;
            }
            let g = grads.grads[i].as_ref().expect("checked above");
            let mo = self.moments.get_mut(&p.name).expect("checked above");
            adamw_update(&mut p.data, g, &mut mo.first, &mut mo.second, self.step, &self.config);
        }
        Ok(())
    }
}

/// In-place AdamW update of one tensor at 1-based step `t`.
pub fn adamw_update<F: Scalar>(theta: &mut [F], grad: &[F], m: &mut [F], v: &mut [F], t: u64, cfg: &AdamWConfig) {
    let b1 = F::of(cfg.beta1);
    let b2 = F::of(cfg.beta2);
    let one = F::one();
    let bc1 = F::of(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = F::of(1.0 - cfg.beta2.powi(t as i32));
    let lr = F::of(cfg.lr);
    let wd = F::of(cfg.weight_decay);
    let eps = F::of(cfg.eps);
    for j in 0..theta.len() {
        let g = grad[j];
        m[j] = b1 * m[j] + (one - b1) * g;
        v[j] = b2 * v[j] + (one - b2) * g * g;
        let mhat = m[j] / bc1;
        let vhat = v[j] / bc2;
        theta[j] = theta[j] - lr * (mhat / (vhat.sqrt() + eps) + wd * theta[j]);
    }
}
