//! Minibatch training loop under a freeze plan.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, ModelState, Reduction, TrainableSet};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::plan::TrainPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Evenly spaced checkpoints per run (the last one is at the final step).
    pub checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 1,
            seed: 42,
            optimizer: AdamWConfig::default(),
            checkpoints: 10,
        }
    }
}

impl TrainConfig {
    pub fn steps_for(&self, n_rows: usize) -> usize {
        n_rows.div_ceil(self.batch_size) * self.epochs
    }

    /// Steps (1-based) after which a checkpoint is taken.
    pub fn checkpoint_steps(&self, total: usize) -> Vec<usize> {
        let n = self.checkpoints.min(total).max(1);
        let mut steps: Vec<usize> = (1..=n).map(|i| (i * total).div_ceil(n)).collect();
        steps.dedup();
        steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub mean_loss: f64,
}

/// Train `model` on `rows` with only the plan's parameters updated.
///
/// `on_checkpoint(step, model, optimizer)` runs at each checkpoint step.
pub fn train<F>(
    model: &mut ModelState<f32>,
    plan: &TrainPlan,
    rows: &[Example],
    cfg: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<TrainSummary>
where
    F: FnMut(usize, &ModelState<f32>, &OptimizerState<f32>) -> Result<()>,
{
    if rows.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let trainable = model.apply_train_plan(plan)?;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), model, &trainable);
    run_steps(model, &trainable, &mut opt, rows, cfg, &mut on_checkpoint)
}

/// Training with an existing optimizer state (used by resumed or phased runs).
pub fn run_steps<F>(
    model: &mut ModelState<f32>,
    trainable: &TrainableSet,
    opt: &mut OptimizerState<f32>,
    rows: &[Example],
    cfg: &TrainConfig,
    on_checkpoint: &mut F,
) -> Result<TrainSummary>
where
    F: FnMut(usize, &ModelState<f32>, &OptimizerState<f32>) -> Result<()>,
{
    let total = cfg.steps_for(rows.len());
    let marks = cfg.checkpoint_steps(total);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;
    let mut loss_sum = 0.0;
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| rows[i].clone()).collect();
            step += 1;
            if trainable.is_empty() {
                last = f64::NAN;
            } else {
                let (loss, grads) = model.loss_and_grads(&batch, Reduction::Mean, Some(&trainable.mask))?;
                opt.apply(model, &grads, trainable)?;
                loss_sum += loss;
                last = loss;
            }
            if marks.contains(&step) {
                on_checkpoint(step, model, opt)?;
            }
        }
    }
    Ok(TrainSummary {
        steps: step,
        final_loss: last,
        mean_loss: loss_sum / step.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoints_are_evenly_spaced_and_end_at_last_step() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.checkpoint_steps(500), vec![50, 100, 150, 200, 250, 300, 350, 400, 450, 500]);
        assert_eq!(cfg.checkpoint_steps(3), vec![1, 2, 3]);
        assert_eq!(cfg.steps_for(8000), 500);
        assert_eq!(cfg.steps_for(8001), 501);
    }
}
