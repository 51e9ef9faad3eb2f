//! Layerwise pretraining, DBM assembly and variational PCD training.

mod gibbs;
mod pcd;
mod rbm;

use serde::{Deserialize, Serialize};

pub use gibbs::{gibbs_sweep, ChainState, RngPosition};
pub use pcd::{examples, negative_phase, pcd_step, positive_phase, train_pcd, PcdConfig, PcdEpoch, PcdTrainer};
pub use rbm::{
    assemble_dbm, train_rbm, train_top_rbm, LabelBlock, RbmChains, RbmParams, RbmTrainConfig, SamplingMode,
};

/// Learning-rate decay, momentum ramp and L2 weight decay shared by the
/// SGD trainers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub learning_rate: f64,
    /// The rate at epoch `e` is `learning_rate / (1 + e / decay_epochs)`;
    /// 0 disables decay.
    pub decay_epochs: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch_epoch: usize,
    pub weight_decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            decay_epochs: 0.0,
            initial_momentum: 0.5,
            final_momentum: 0.9,
            momentum_switch_epoch: 5,
            weight_decay: 0.0002,
        }
    }
}

impl Schedule {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.decay_epochs > 0.0 {
            self.learning_rate / (1.0 + epoch as f64 / self.decay_epochs)
        } else {
            self.learning_rate
        }
    }

    pub fn momentum(&self, epoch: usize) -> f64 {
        if epoch < self.momentum_switch_epoch {
            self.initial_momentum
        } else {
            self.final_momentum
        }
    }
}
