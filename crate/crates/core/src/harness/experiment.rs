use std::io::Write;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::evaluate::{evaluate, median, per_sample_errors, Metric, MetricKind};
use super::metrics::{average_accuracy, forgetting_first_task};
use super::records::RecordWriter;
use super::tasks::{generate_tasks, tasks_checksum, SyntheticTaskSpec};
use crate::error::Result;
use crate::numerics::Rng;
use crate::routing::route_batch;
use crate::training::{train_seq_lora, train_sequence, Dataset, Method, ModelState, RunLog, TaskData};

/// Stream offset so model initialization never shares draws with task
/// generation.
const MODEL_SEED_OFFSET: u64 = 0x005E_ED0F_C0DE;

/// Everything shared by both arms of a seed: data, initial model, metric.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub specs: Vec<SyntheticTaskSpec>,
    pub tasks: Vec<TaskData>,
    pub initial: ModelState,
    pub metric: Metric,
    pub data_checksum: u64,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let seed = cfg.train.seed;
    let (specs, tasks): (Vec<_>, Vec<_>) = generate_tasks(seed, &cfg.tasks)?.into_iter().unzip();
    let mut rng = Rng::new(seed.wrapping_add(MODEL_SEED_OFFSET));
    let initial = ModelState::init(cfg.tasks.input_dim, cfg.tasks.output_dim, &cfg.train, &mut rng)?;
    let metric = match cfg.experiment.metric {
        MetricKind::Mse => Metric::Mse,
        MetricKind::ThresholdAccuracy => {
            let threshold = match cfg.experiment.threshold {
                Some(t) => t,
                None => median(&per_sample_errors(&initial, &tasks[0].eval)?)?,
            };
            Metric::ThresholdAccuracy { threshold }
        }
    };
    Ok(Prepared {
        data_checksum: tasks_checksum(&tasks),
        specs,
        tasks,
        initial,
        metric,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub method: Method,
    pub seed: u64,
    pub data_checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub average_accuracy: f64,
    /// Absent with fewer than three tasks.
    pub forgetting_first_task: Option<f64>,
    /// Per task, the per-head entropy of the batch-mean routing over the
    /// task's eval inputs with the final parameters.
    pub final_routing_entropy: Vec<Vec<f64>>,
    pub routing_evaluations: u64,
    pub inference_routing_evaluations: u64,
}

#[derive(Clone, Debug)]
pub struct ArmOutput {
    pub log: RunLog,
    pub summary: Summary,
    pub state: ModelState,
}

#[derive(Serialize)]
struct BatchRecord<'a> {
    method: Method,
    task: usize,
    step: usize,
    loss: f64,
    entropy: &'a [f64],
    anchor_checksum: String,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    method: Method,
    round: usize,
    scores: &'a [f64],
}

#[derive(Serialize)]
struct TaskRecord<'a> {
    task: usize,
    mean: &'a [f64],
    target_map_checksum: String,
    train_checksum: String,
    eval_checksum: String,
}

pub(crate) fn hex(v: u64) -> String {
    format!("{v:016x}")
}

pub fn final_routing_entropy(state: &ModelState, tasks: &[TaskData]) -> Result<Vec<Vec<f64>>> {
    tasks
        .iter()
        .map(|t| Ok(route_batch(&t.eval.inputs, &state.encoder, &state.keys)?.head_entropies()))
        .collect()
}

/// Trains one arm from the shared initial state, writing batch and eval
/// records, and returns the log with its summary.
pub fn run_arm<W: Write>(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    method: Method,
    sink: &mut RecordWriter<W>,
) -> Result<ArmOutput> {
    let mut state = prepared.initial.clone();
    state.ops.reset();
    let metric = prepared.metric;
    let eval = |s: &ModelState, d: &Dataset| evaluate(s, d, metric);
    let log = match method {
        Method::Procl => train_sequence(&mut state, &prepared.tasks, &cfg.train, eval),
        Method::SeqLora => train_seq_lora(&mut state, &prepared.tasks, &cfg.train, eval),
    }
    .map_err(|e| e.context(format!("{} arm, seed {}", method.as_str(), cfg.train.seed)))?;
    let train_routing = state.ops.routing_evaluations();

    for task in &log.tasks {
        for b in &task.batches {
            sink.write(
                "batch",
                &BatchRecord {
                    method,
                    task: b.task,
                    step: b.step,
                    loss: b.loss,
                    entropy: &b.entropy,
                    anchor_checksum: hex(b.anchor_checksum),
                },
            )?;
        }
    }
    for (round, scores) in log.accuracy.rounds().iter().enumerate() {
        sink.write("eval", &EvalRecord { method, round, scores })?;
    }

    let summary = Summary {
        method,
        seed: cfg.train.seed,
        data_checksum: hex(prepared.data_checksum),
        threshold: match metric {
            Metric::ThresholdAccuracy { threshold } => Some(threshold),
            Metric::Mse => None,
        },
        average_accuracy: average_accuracy(&log.accuracy)?,
        forgetting_first_task: (log.accuracy.num_rounds() >= 3)
            .then(|| forgetting_first_task(&log.accuracy))
            .transpose()?,
        final_routing_entropy: final_routing_entropy(&state, &prepared.tasks)?,
        routing_evaluations: train_routing,
        // The eval closure runs in infer mode; any count beyond training
        // would show up here.
        inference_routing_evaluations: state.ops.routing_evaluations() - train_routing,
    };
    sink.write("summary", &summary)?;
    Ok(ArmOutput { log, summary, state })
}

/// Generates the tasks, writes the config and task records, and runs the
/// configured method.
pub fn run_experiment<W: Write>(cfg: &ExperimentConfig, sink: &mut RecordWriter<W>) -> Result<ArmOutput> {
    let prepared = prepare(cfg).map_err(|e| e.context("preparing experiment"))?;
    sink.write("config", cfg)?;
    write_task_records(&prepared, sink)?;
    run_arm(&prepared, cfg, cfg.experiment.method, sink)
}

pub(crate) fn write_task_records<W: Write>(prepared: &Prepared, sink: &mut RecordWriter<W>) -> Result<()> {
    for (spec, data) in prepared.specs.iter().zip(&prepared.tasks) {
        sink.write(
            "task",
            &TaskRecord {
                task: spec.task,
                mean: &spec.mean,
                target_map_checksum: hex(spec.target_map.checksum()),
                train_checksum: hex(data.train.checksum()),
                eval_checksum: hex(data.eval.checksum()),
            },
        )?;
    }
    Ok(())
}

/// Dominant slot per head for the batch-mean routing of `dataset`.
pub fn dominant_slots(state: &ModelState, dataset: &Dataset) -> Result<Vec<usize>> {
    let routing = route_batch(&dataset.inputs, &state.encoder, &state.keys)?;
    Ok(routing
        .batch_alpha
        .iter()
        .map(|a| {
            a.iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect())
}

/// Mean pairwise Jaccard overlap of the tasks' dominant-slot sets (the
/// slots that are some head's argmax). Lower means more task-specific
/// routing.
pub fn routing_overlap(state: &ModelState, tasks: &[TaskData]) -> Result<f64> {
    let sets = tasks
        .iter()
        .map(|t| {
            let mut s = dominant_slots(state, &t.eval)?;
            s.sort_unstable();
            s.dedup();
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let shared = sets[i].iter().filter(|s| sets[j].contains(s)).count();
            let union = sets[i].len() + sets[j].len() - shared;
            total += shared as f64 / union as f64;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::records::null_writer;
    use crate::harness::tasks::TaskConfig;
    use crate::training::TrainConfig;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            tasks: TaskConfig { n_train: 64, n_eval: 32, ..Default::default() },
            train: TrainConfig { seed: 3, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn arms_share_data_and_initial_state() {
        let cfg = small();
        let p = prepare(&cfg).unwrap();
        let mut sink = null_writer();
        let a = run_arm(&p, &cfg, Method::Procl, &mut sink).unwrap();
        let b = run_arm(&p, &cfg, Method::SeqLora, &mut sink).unwrap();
        assert_eq!(a.summary.data_checksum, b.summary.data_checksum);
        assert_eq!(p.data_checksum, prepare(&cfg).unwrap().data_checksum);
        assert!(a.summary.routing_evaluations > 0);
        assert_eq!(b.summary.routing_evaluations, 0);
        assert_eq!(a.summary.inference_routing_evaluations, 0);
        assert_eq!(a.summary.final_routing_entropy.len(), 3);
    }

    #[test]
    fn record_stream_is_deterministic() {
        let cfg = small();
        let run = || {
            let mut sink = RecordWriter::new(Vec::new());
            run_experiment(&cfg, &mut sink).unwrap();
            sink.into_inner().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn default_threshold_is_median_untrained_error() {
        let cfg = small();
        let p = prepare(&cfg).unwrap();
        let errs = per_sample_errors(&p.initial, &p.tasks[0].eval).unwrap();
        match p.metric {
            Metric::ThresholdAccuracy { threshold } => {
                let below = errs.iter().filter(|e| **e < threshold).count();
                assert_eq!(below, errs.len() / 2);
            }
            Metric::Mse => panic!("expected threshold metric"),
        }
    }

    #[test]
    fn overlap_of_a_single_task_is_zero() {
        let cfg = small();
        let p = prepare(&cfg).unwrap();
        assert_eq!(routing_overlap(&p.initial, &p.tasks[..1]).unwrap(), 0.0);
        let o = routing_overlap(&p.initial, &p.tasks).unwrap();
        assert!((0.0..=1.0).contains(&o));
    }
}
