//! Experiment configuration files.
//!
//! The format is TOML restricted to three optional tables. Every key is
//! optional and unknown keys are rejected:
//!
//! ```toml
//! [train]
//! num_programs = 4        # N
//! key_dim = 16            # d_k
//! lambda = 0.9            # consolidation rate, in [0, 1]
//! rank = 8                # R, a multiple of num_programs
//! learning_rate = 0.04
//! epochs_per_task = 10
//! batch_size = 16
//! seed = 0
//! freeze_gamma = false
//!
//! [tasks]
//! num_tasks = 3
//! input_dim = 8
//! output_dim = 4
//! tokens = 4
//! separation = 4.0
//! input_scale = 1.0
//! noise_std = 0.05
//! n_train = 512
//! n_eval = 256
//!
//! [experiment]
//! method = "procl"        # or "seq_lora"
//! metric = "threshold_accuracy"   # or "mse"
//! output = "runs"
//! # threshold = 0.5      # default: median untrained error on the first task
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate::MetricKind;
use super::tasks::TaskConfig;
use crate::error::{Error, Result};
use crate::training::{Method, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub method: Method,
    pub metric: MetricKind,
    pub output: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            method: Method::Procl,
            metric: MetricKind::ThresholdAccuracy,
            output: "runs".into(),
            threshold: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub tasks: TaskConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.tasks.validate()?;
        if let Some(t) = self.experiment.threshold {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid("threshold", t, "must be finite and > 0"));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse_config_str(to_toml())` round-trips.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    parse_config_str(&text).map_err(|e| e.context(format!("config {}", path.display())))
}
