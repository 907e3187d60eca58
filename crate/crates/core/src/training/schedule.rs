use serde::{Deserialize, Serialize};

use super::model::{backward, forward, loss_mse, sgd_step, Batch, ModelState, Mode};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::harness::AccuracyMatrix;
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Procl,
    SeqLora,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Procl => "procl",
            Method::SeqLora => "seq_lora",
        }
    }
}

/// Samples with one target row each. Batches are taken in stored order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Matrix>,
    pub targets: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub eval: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLog {
    pub task: usize,
    pub step: usize,
    pub loss: f64,
    /// Entropy of `ᾱ_h` per head; empty for the baseline.
    pub entropy: Vec<f64>,
    pub anchor_checksum: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskLog {
    pub task: usize,
    pub batches: Vec<BatchLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub method: Method,
    pub tasks: Vec<TaskLog>,
    pub accuracy: AccuracyMatrix,
    /// Anchor checksum frozen at the start of each task (empty for the
    /// baseline, which has no anchor).
    pub anchor_checksums: Vec<u64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Matrix>, targets: Matrix) -> Result<Self> {
        if inputs.len() != targets.rows() {
            return Err(Error::LengthMismatch {
                op: "Dataset::new",
                expected: inputs.len(),
                actual: targets.rows(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Consecutive mini-batches; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", 0, "must be positive"));
        }
        (0..self.len())
            .step_by(batch_size)
            .map(|start| {
                let end = (start + batch_size).min(self.len());
                let targets = self.targets.row_block(start, end - start).to_matrix();
                Batch::new(self.inputs[start..end].to_vec(), targets)
            })
            .collect()
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.targets.clone())
    }

    pub fn checksum(&self) -> u64 {
        self.inputs
            .iter()
            .fold(self.targets.checksum(), |acc, m| acc.rotate_left(5) ^ m.checksum())
    }
}

fn run_task(state: &mut ModelState, dataset: &Dataset, cfg: &TrainConfig, task: usize, method: Method) -> Result<TaskLog> {
    cfg.validate()?;
    let frozen = state.frozen_checksum();
    let batches = dataset.batches(cfg.batch_size)?;
    let mut log = TaskLog {
        task,
        batches: Vec::with_capacity(batches.len() * cfg.epochs_per_task),
    };
    let mut step = 0;
    for _ in 0..cfg.epochs_per_task {
        for batch in &batches {
            let mode = match method {
                Method::Procl => Mode::Train,
                Method::SeqLora => Mode::Infer,
            };
            let pass = forward(state, &batch.inputs, mode)?;
            let loss = loss_mse(&pass.y, &batch.targets)?;
            let mut grads = backward(state, batch, &pass)?;
            if cfg.freeze_gamma {
                grads.gamma_logit = 0.0;
            }
            sgd_step(state, &grads, cfg.learning_rate)?;
            if method == Method::Procl {
                // W_exec from the pre-step forward pass.
                state.consolidate(&pass.w_exec, cfg.lambda)?;
            }
            if state.frozen_checksum() != frozen {
                return Err(Error::Contract(format!("frozen tensors changed during task {task}, step {step}")));
            }
            log.batches.push(BatchLog {
                task,
                step,
                loss,
                entropy: pass.routing.as_ref().map(|r| r.head_entropies()).unwrap_or_default(),
                anchor_checksum: state.anchor.checksum(),
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Inner loop of the training algorithm for one task. The anchor must
/// already be frozen for this task.
///
/// Per mini-batch: train-mode forward, loss, backward, SGD step, then
/// consolidation toward the forward pass's `W_exec`.
pub fn train_task(state: &mut ModelState, dataset: &Dataset, cfg: &TrainConfig, task: usize) -> Result<TaskLog> {
    run_task(state, dataset, cfg, task, Method::Procl)
}

/// Full task sequence: freeze the anchor, train, then evaluate every task
/// seen so far with `eval` (which should use infer mode).
pub fn train_sequence<F>(state: &mut ModelState, tasks: &[TaskData], cfg: &TrainConfig, eval: F) -> Result<RunLog>
where
    F: Fn(&ModelState, &Dataset) -> Result<f64>,
{
    run_sequence(state, tasks, cfg, eval, Method::Procl)
}

/// Sequential-LoRA baseline: `W` and `A` trained directly by SGD and carried
/// across tasks; no routing, anchor or consolidation.
pub fn train_seq_lora<F>(state: &mut ModelState, tasks: &[TaskData], cfg: &TrainConfig, eval: F) -> Result<RunLog>
where
    F: Fn(&ModelState, &Dataset) -> Result<f64>,
{
    run_sequence(state, tasks, cfg, eval, Method::SeqLora)
}

fn run_sequence<F>(state: &mut ModelState, tasks: &[TaskData], cfg: &TrainConfig, eval: F, method: Method) -> Result<RunLog>
where
    F: Fn(&ModelState, &Dataset) -> Result<f64>,
{
    if tasks.is_empty() {
        return Err(Error::EmptyInput("train_sequence"));
    }
    let mut log = RunLog {
        method,
        tasks: Vec::with_capacity(tasks.len()),
        accuracy: AccuracyMatrix::default(),
        anchor_checksums: Vec::new(),
    };
    for (t, task) in tasks.iter().enumerate() {
        if method == Method::Procl {
            state.refresh_anchor();
            log.anchor_checksums.push(state.anchor.checksum());
        }
        let task_log = run_task(state, &task.train, cfg, t, method).map_err(|e| e.context(format!("task {t}")))?;
        log.tasks.push(task_log);
        let row = tasks[..=t]
            .iter()
            .map(|seen| eval(state, &seen.eval))
            .collect::<Result<Vec<_>>>()?;
        log.accuracy.push_round(row)?;
    }
    Ok(log)
}
