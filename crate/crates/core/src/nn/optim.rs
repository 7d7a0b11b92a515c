use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mlp::MlpParams;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Minibatch SGD settings shared by the encoder and the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 160,
            lr_init: 0.1,
            lr_min: 0.0,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_init >= self.lr_min) {
            return Err(Error::Config(format!(
                "need lr_init >= lr_min >= 0, got lr_init={} lr_min={}",
                self.lr_init, self.lr_min
            )));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Cosine decay from `lr_init` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_min: f64) -> f64 {
    debug_assert!(total_steps >= 1 && step <= total_steps);
    let progress = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (PI * progress).cos())
}

/// `params -= lr · grads`
pub fn sgd_step(params: &mut MlpParams, grads: &MlpParams, lr: f64) -> Result<()> {
    params.add_scaled(grads, -lr)
}

/// Epoch-wise minibatch index lists: one seeded shuffle per epoch, last
/// partial batch kept.
pub struct BatchSchedule {
    order: Vec<usize>,
    batch_size: usize,
    shuffle: bool,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, shuffle: bool) -> Self {
        BatchSchedule {
            order: (0..n).collect(),
            batch_size,
            shuffle,
        }
    }

    /// Reshuffle (if enabled) and return this epoch's batches.
    pub fn epoch(&mut self, rng: &mut Rng) -> Vec<Vec<usize>> {
        if self.shuffle {
            self.order.shuffle(rng);
        }
        self.order
            .chunks(self.batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}
