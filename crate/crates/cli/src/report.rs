//! Versioned JSON documents written by the CLI.
//!
//! Every report is checked with `validate` before it is written.

use std::path::Path;

use serde::{Deserialize, Serialize};

use esdkit::nn::{AdamW, DenseLayer, DenseNetwork};
use esdkit::objective::CalibrationObjectiveSpec;
use esdkit::selection::{SelectionResult, TrialRecord};
use esdkit::training::TrainHistory;

use crate::config::RunConfig;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub seeds: Vec<u64>,
}

impl Environment {
    pub fn new(seeds: Vec<u64>) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<DenseLayer>,
    pub optimizer: AdamW,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn new(net: &DenseNetwork, optimizer: AdamW, seed: u64, config_hash: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            layer_sizes: net.layer_sizes(),
            layers: net.layers().to_vec(),
            step: optimizer.step,
            optimizer,
            seed,
            config_hash,
        }
    }

    pub fn network(&self) -> esdkit::Result<DenseNetwork> {
        DenseNetwork::from_layers(self.layers.clone())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let net = self
            .network()
            .map_err(|e| CliError::internal(e.to_string()))?;
        if net.layer_sizes() != self.layer_sizes || self.step != self.optimizer.step {
            return Err(CliError::internal("checkpoint fields disagree"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub command: String,
    pub environment: Environment,
    pub config: RunConfig,
    pub config_hash: String,
    pub history: TrainHistory,
}

impl TrainReport {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.history.epochs.len() != self.config.train.epochs {
            return Err(CliError::internal(
                "history length differs from the epoch count",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    /// Calibration-objective trainings across all seeds (baseline excluded).
    pub runs: usize,
    pub runs_per_seed: usize,
    pub seeds: usize,
    pub total_steps: u64,
    pub total_wall_clock_s: f64,
}

impl Cost {
    pub fn from_trials(trials: &[&TrialRecord], runs_per_seed: usize, seeds: usize) -> Self {
        Self {
            runs: trials.len(),
            runs_per_seed,
            seeds,
            total_steps: trials.iter().map(|t| t.steps).sum(),
            total_wall_clock_s: trials.iter().map(|t| t.wall_clock_s).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub val_acc: f64,
    pub trials: Vec<TrialRecord>,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub command: String,
    pub environment: Environment,
    pub config: RunConfig,
    pub config_hash: String,
    pub objective: String,
    pub baseline: Baseline,
    /// Lambda stage, then the inner stage when the objective has one.
    pub stages: Vec<SelectionResult>,
    pub chosen: Option<CalibrationObjectiveSpec>,
    pub failure: Option<String>,
    pub cost: Cost,
}

impl SweepReport {
    pub fn all_trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.stages.iter().flat_map(|s| s.trials.iter())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let trials: Vec<&TrialRecord> = self.all_trials().collect();
        let recomputed = Cost::from_trials(&trials, self.cost.runs_per_seed, self.cost.seeds);
        let consistent = recomputed.runs == self.cost.runs
            && recomputed.total_steps == self.cost.total_steps
            && self.cost.runs == self.cost.runs_per_seed * self.cost.seeds
            && self.stages.last().map(|s| s.runs_per_seed) == Some(self.cost.runs_per_seed)
            && self.environment.seeds.len() == self.cost.seeds;
        if !consistent {
            return Err(CliError::internal("sweep report totals are inconsistent"));
        }
        if self.chosen.is_some() == self.failure.is_some() {
            return Err(CliError::internal(
                "sweep report needs exactly one of chosen/failure",
            ));
        }
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    esdkit::io::write_json(path, value).map_err(CliError::from)
}
