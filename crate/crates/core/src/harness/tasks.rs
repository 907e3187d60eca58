//! Synthetic regression tasks with orthogonal input means.
//!
//! Task `t` draws each token as `separation·e_t + input_scale·ξ` with
//! `ξ ~ N(0, I)`, and its target is `z·M_tᵀ + noise` where `z` is the
//! sample's mean-pooled token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matvec, mean_rows, Matrix, Rng};
use crate::training::{Dataset, TaskData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub num_tasks: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Tokens per sample.
    pub tokens: usize,
    pub separation: f64,
    pub input_scale: f64,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_tasks: 3,
            input_dim: 8,
            output_dim: 4,
            tokens: 4,
            separation: 4.0,
            input_scale: 1.0,
            noise_std: 0.05,
            n_train: 512,
            n_eval: 256,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::invalid("num_tasks", self.num_tasks, "must be positive"));
        }
        if self.input_dim < self.num_tasks {
            return Err(Error::invalid(
                "input_dim",
                self.input_dim,
                "orthogonal task means need input_dim >= num_tasks",
            ));
        }
        if self.output_dim == 0 || self.tokens == 0 || self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config(
                "output_dim, tokens, n_train and n_eval must be positive".into(),
            ));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::invalid("separation", self.separation, "must be finite and >= 0"));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::invalid("input_scale", self.input_scale, "must be finite and > 0"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std", self.noise_std, "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub task: usize,
    pub mean: Vec<f64>,
    pub input_scale: f64,
    /// `M_t`, `output_dim × input_dim`.
    pub target_map: Matrix,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

impl SyntheticTaskSpec {
    pub fn sample(&self, count: usize, tokens: usize, rng: &mut Rng) -> Result<Dataset> {
        let d = self.mean.len();
        let d_out = self.target_map.rows();
        let mut inputs = Vec::with_capacity(count);
        let mut targets = Matrix::zeros(count, d_out);
        for b in 0..count {
            let mut x = rng.gaussian_matrix(tokens, d, self.input_scale);
            for t in 0..tokens {
                for (v, m) in x.row_mut(t).iter_mut().zip(&self.mean) {
                    *v += m;
                }
            }
            let y = matvec(&self.target_map, &mean_rows(&x)?)?;
            for (o, v) in targets.row_mut(b).iter_mut().zip(y) {
                *o = v + self.noise_std * rng.gaussian();
            }
            inputs.push(x);
        }
        Dataset::new(inputs, targets)
    }
}

/// Deterministic in `seed`. Each task's map is `N(0, 1/D)` and
/// independent across tasks.
pub fn generate_tasks(seed: u64, cfg: &TaskConfig) -> Result<Vec<(SyntheticTaskSpec, TaskData)>> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let std = (1.0 / cfg.input_dim as f64).sqrt();
    (0..cfg.num_tasks)
        .map(|t| {
            let mut mean = vec![0.0; cfg.input_dim];
            mean[t] = cfg.separation;
            let spec = SyntheticTaskSpec {
                task: t,
                mean,
                input_scale: cfg.input_scale,
                target_map: rng.gaussian_matrix(cfg.output_dim, cfg.input_dim, std),
                noise_std: cfg.noise_std,
                n_train: cfg.n_train,
                n_eval: cfg.n_eval,
            };
            let train = spec.sample(cfg.n_train, cfg.tokens, &mut rng)?;
            let eval = spec.sample(cfg.n_eval, cfg.tokens, &mut rng)?;
            Ok((spec, TaskData { train, eval }))
        })
        .collect()
}

/// Combined checksum over every task's train and eval data.
pub fn tasks_checksum(tasks: &[TaskData]) -> u64 {
    tasks
        .iter()
        .fold(tasks.len() as u64, |acc, t| acc.rotate_left(11) ^ t.train.checksum() ^ t.eval.checksum().rotate_left(3))
}
