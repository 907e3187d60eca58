//! Command implementations behind the `procl` binary. Each writes its
//! artifacts under an output directory and returns a summary.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{parse_config, ExperimentConfig};
use super::evaluate::median;
use super::experiment::{prepare, run_arm, run_experiment, write_task_records, Summary};
use super::records::RecordWriter;
use super::verify::{run_theory_suites, TheoryReport};
use crate::error::{Error, Result};
use crate::training::{write_model, Method};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const THEORY_FILE: &str = "theory.jsonl";
pub const BENCH_FILE: &str = "bench.jsonl";
pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))
}

fn writer(path: &Path) -> Result<RecordWriter<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| Error::from(e).context(format!("creating {}", path.display())))?;
    Ok(RecordWriter::new(BufWriter::new(f)))
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// `train`: one arm of the configured experiment. Writes the record stream
/// and the final model checkpoint.
pub fn train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Summary> {
    let cfg = load(config, seed)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.experiment.output));
    create_dir(&dir)?;
    let mut sink = writer(&dir.join(RECORDS_FILE))?;
    let result = run_experiment(&cfg, &mut sink)?;
    sink.into_inner()?;
    let mut ckpt = BufWriter::new(File::create(dir.join(MODEL_FILE))?);
    write_model(&mut ckpt, &result.state)?;
    Ok(result.summary)
}

/// `verify-theory`: gradient, interference and consolidation suites.
pub fn verify_theory(seed: u64, out: &Path) -> Result<TheoryReport> {
    create_dir(out)?;
    let report = run_theory_suites(seed)?;
    let mut sink = writer(&out.join(THEORY_FILE))?;
    sink.write("gradient_check", &report.gradients)?;
    sink.write("decomposition", &report.decomposition)?;
    sink.write("interference_bound", &report.bound)?;
    sink.write("consolidation", &report.consolidation)?;
    sink.into_inner()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSummary {
    pub seeds: Vec<u64>,
    pub procl_median_forgetting: f64,
    pub seq_lora_median_forgetting: f64,
    pub procl_median_average_accuracy: f64,
    pub seq_lora_median_average_accuracy: f64,
}

#[derive(Serialize)]
struct CurveRow {
    seed: u64,
    method: Method,
    round: usize,
    task: usize,
    score: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    seed: u64,
    method: Method,
    average_accuracy: f64,
    forgetting_first_task: Option<f64>,
}

/// Paired runs of both arms on `seeds` consecutive seeds starting at the
/// configured seed.
pub fn bench_forgetting_config(cfg: &ExperimentConfig, seeds: usize, out: &Path) -> Result<BenchSummary> {
    if seeds == 0 {
        return Err(Error::invalid("seeds", seeds, "must be positive"));
    }
    if cfg.tasks.num_tasks < 3 {
        return Err(Error::invalid("num_tasks", cfg.tasks.num_tasks, "forgetting needs at least 3 tasks"));
    }
    create_dir(out)?;
    let mut sink = writer(&out.join(BENCH_FILE))?;
    let mut curves = csv::Writer::from_path(out.join(CURVES_FILE))?;
    let mut table = csv::Writer::from_path(out.join(SUMMARY_FILE))?;
    sink.write("config", cfg)?;

    let mut forgetting = [Vec::new(), Vec::new()];
    let mut aa = [Vec::new(), Vec::new()];
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| cfg.train.seed.wrapping_add(k)).collect();
    for &seed in &seed_list {
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        let prepared = prepare(&run_cfg)?;
        write_task_records(&prepared, &mut sink)?;
        for (i, method) in [Method::Procl, Method::SeqLora].into_iter().enumerate() {
            let arm = run_arm(&prepared, &run_cfg, method, &mut sink)?;
            for (round, scores) in arm.log.accuracy.rounds().iter().enumerate() {
                for (task, &score) in scores.iter().enumerate() {
                    curves.serialize(CurveRow { seed, method, round, task, score })?;
                }
            }
            table.serialize(SummaryRow {
                seed,
                method,
                average_accuracy: arm.summary.average_accuracy,
                forgetting_first_task: arm.summary.forgetting_first_task,
            })?;
            forgetting[i].push(arm.summary.forgetting_first_task.unwrap_or(f64::NAN));
            aa[i].push(arm.summary.average_accuracy);
        }
    }
    let summary = BenchSummary {
        seeds: seed_list,
        procl_median_forgetting: median(&forgetting[0])?,
        seq_lora_median_forgetting: median(&forgetting[1])?,
        procl_median_average_accuracy: median(&aa[0])?,
        seq_lora_median_average_accuracy: median(&aa[1])?,
    };
    sink.write("bench_summary", &summary)?;
    sink.into_inner()?;
    curves.flush()?;
    table.flush()?;
    Ok(summary)
}

/// `bench-forgetting` from a config file.
pub fn bench_forgetting(config: &Path, seeds: usize, out: &Path) -> Result<BenchSummary> {
    let cfg = load(config, None)?;
    bench_forgetting_config(&cfg, seeds, out)
}
