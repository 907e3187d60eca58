//! Training loop for one adapted linear layer: forward, hand-derived
//! backward, SGD, per-batch consolidation, task-boundary anchor refresh,
//! and routing-free inference. Also the sequential-LoRA baseline.

mod checkpoint;
mod model;
mod schedule;

pub use checkpoint::{read_model, write_model, MODEL_MAGIC};
pub use model::{
    backward, exec_gradient, forward, loss_mse, sgd_step, Batch, ForwardPass, Gradients, Leaf, ModelState,
    Mode, OpCounter,
};
pub use schedule::{
    train_seq_lora, train_sequence, train_task, BatchLog, Dataset, Method, RunLog, TaskData, TaskLog,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of programs `N`.
    pub num_programs: usize,
    /// Key width `d_k`.
    pub key_dim: usize,
    /// Consolidation rate `λ`.
    pub lambda: f64,
    /// Adapter rank `R`; must be a multiple of `num_programs`.
    pub rank: usize,
    pub learning_rate: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep `γ` at its initial value instead of training it.
    pub freeze_gamma: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_programs: 4,
            key_dim: 16,
            lambda: 0.9,
            rank: 8,
            learning_rate: 0.04,
            epochs_per_task: 10,
            batch_size: 16,
            seed: 0,
            freeze_gamma: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_programs == 0 {
            return Err(Error::invalid("num_programs", self.num_programs, "must be positive"));
        }
        if self.rank == 0 || !self.rank.is_multiple_of(self.num_programs) {
            return Err(Error::invalid("rank", self.rank, "must be a positive multiple of num_programs"));
        }
        if self.key_dim == 0 {
            return Err(Error::invalid("key_dim", self.key_dim, "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda", self.lambda, "must lie in [0, 1]"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate", self.learning_rate, "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", self.batch_size, "must be positive"));
        }
        Ok(())
    }
}
