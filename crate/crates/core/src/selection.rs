//! Hyperparameter sweeps and model selection.
//!
//! Candidates are compared on validation metrics averaged over seeds. The
//! rule: among candidates whose mean validation accuracy is at least the
//! baseline's minus 1.5 accuracy points, pick the lowest mean validation
//! ECE. Earlier grid entries win ties. If nothing qualifies the result
//! carries the full table and no choice.
//!
//! MMCE and SB-ECE are tuned sequentially: lambda first, then the inner
//! hyperparameter at the chosen lambda. ESD has no inner hyperparameter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::objective::{CalibrationObjective, CalibrationObjectiveSpec};
use crate::training::{train_fresh, TrainConfig};

/// Allowed drop in validation accuracy, as a fraction (1.5 points).
pub const ACCURACY_BUDGET: f64 = 0.015;

/// `0.2, 0.4, 0.6, 0.8, 1, 2, ..., 10`.
pub fn default_lambda_grid() -> Vec<f64> {
    let mut grid = vec![0.2, 0.4, 0.6, 0.8];
    grid.extend((1..=10).map(f64::from));
    grid
}

pub const MMCE_WIDTH_GRID: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
pub const SB_ECE_TEMPERATURE_GRID: [f64; 4] = [0.0001, 0.001, 0.01, 0.1];
pub const SB_ECE_BINS: usize = 15;

/// One trained model, as persisted in the sweep log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config: CalibrationObjectiveSpec,
    pub seed: u64,
    pub val_acc: f64,
    pub val_ece: f64,
    pub test_acc: f64,
    pub test_ece: f64,
    pub wall_clock_s: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub config: CalibrationObjectiveSpec,
    pub val_acc: f64,
    pub val_ece: f64,
    pub test_acc: f64,
    pub test_ece: f64,
    pub test_acc_std: f64,
    pub test_ece_std: f64,
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Option<CalibrationObjectiveSpec>,
    pub baseline_val_acc: f64,
    pub candidates: Vec<CandidateSummary>,
    pub trials: Vec<TrialRecord>,
    /// Distinct configurations trained (per seed).
    pub runs_per_seed: usize,
    pub failure: Option<String>,
}

impl SelectionResult {
    pub fn chosen_candidate(&self) -> Option<&CandidateSummary> {
        let chosen = self.chosen?;
        self.candidates.iter().find(|c| c.config == chosen)
    }

    /// The chosen configuration, or a selection error naming the best
    /// accuracy reached.
    pub fn require_choice(&self) -> Result<CalibrationObjectiveSpec> {
        self.chosen.ok_or_else(|| {
            Error::Selection(
                self.failure
                    .clone()
                    .unwrap_or_else(|| "no candidate selected".into()),
            )
        })
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Apply the selection rule to per-seed trial records.
///
/// `trials` must be grouped by configuration in grid order.
pub fn select(
    trials: Vec<TrialRecord>,
    baseline_val_acc: f64,
    runs_per_seed: usize,
) -> SelectionResult {
    let mut configs: Vec<CalibrationObjectiveSpec> = Vec::new();
    for t in &trials {
        if !configs.contains(&t.config) {
            configs.push(t.config);
        }
    }
    let threshold = baseline_val_acc - ACCURACY_BUDGET;
    let candidates: Vec<CandidateSummary> = configs
        .iter()
        .map(|cfg| {
            let group: Vec<&TrialRecord> = trials.iter().filter(|t| t.config == *cfg).collect();
            let (val_acc, _) = mean_std(group.iter().map(|t| t.val_acc));
            let (val_ece, _) = mean_std(group.iter().map(|t| t.val_ece));
            let (test_acc, test_acc_std) = mean_std(group.iter().map(|t| t.test_acc));
            let (test_ece, test_ece_std) = mean_std(group.iter().map(|t| t.test_ece));
            CandidateSummary {
                config: *cfg,
                val_acc,
                val_ece,
                test_acc,
                test_ece,
                test_acc_std,
                test_ece_std,
                // Small epsilon so the bound is not lost to rounding of the mean.
                eligible: val_acc >= threshold - 1e-12,
            }
        })
        .collect();
    let chosen = candidates
        .iter()
        .filter(|c| c.eligible)
        .fold(None::<&CandidateSummary>, |best, c| match best {
            Some(b) if b.val_ece <= c.val_ece => Some(b),
            _ => Some(c),
        })
        .map(|c| c.config);
    let failure = chosen.is_none().then(|| {
        let best = candidates.iter().map(|c| c.val_acc).fold(f64::NEG_INFINITY, f64::max);
        format!(
            "no candidate reaches validation accuracy {threshold:.4} (baseline {baseline_val_acc:.4} \
             minus {ACCURACY_BUDGET}); best was {best:.4}"
        )
    });
    SelectionResult {
        chosen,
        baseline_val_acc,
        candidates,
        trials,
        runs_per_seed,
        failure,
    }
}

/// Shared state for sweeps over one data split and seed set: the template
/// configuration and the baseline (objective `none`) trained once per seed.
#[derive(Debug, Clone)]
pub struct SweepRunner<'a> {
    splits: &'a Splits,
    template: TrainConfig,
    seeds: Vec<u64>,
    baseline: Vec<TrialRecord>,
}

impl<'a> SweepRunner<'a> {
    pub fn new(splits: &'a Splits, template: TrainConfig, seeds: Vec<u64>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::config("sweep needs at least one seed"));
        }
        template.validate()?;
        let mut runner = Self {
            splits,
            template,
            seeds,
            baseline: Vec::new(),
        };
        runner.baseline = runner.run_trials(&[CalibrationObjectiveSpec::none()])?;
        Ok(runner)
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn template(&self) -> &TrainConfig {
        &self.template
    }

    pub fn baseline_trials(&self) -> &[TrialRecord] {
        &self.baseline
    }

    pub fn baseline_val_acc(&self) -> f64 {
        mean_std(self.baseline.iter().map(|t| t.val_acc)).0
    }

    /// Train every `(config, seed)` pair; records come back grouped by config
    /// in input order, seeds in input order.
    pub fn run_trials(&self, configs: &[CalibrationObjectiveSpec]) -> Result<Vec<TrialRecord>> {
        let jobs: Vec<(CalibrationObjectiveSpec, u64)> = configs
            .iter()
            .flat_map(|c| self.seeds.iter().map(move |&s| (*c, s)))
            .collect();
        jobs.par_iter()
            .map(|&(objective, seed)| {
                let cfg = TrainConfig {
                    objective,
                    seed,
                    ..self.template.clone()
                };
                let (_, h) = train_fresh(self.splits, &cfg)?;
                let last = h.last();
                Ok(TrialRecord {
                    config: objective,
                    seed,
                    val_acc: last.val.accuracy,
                    val_ece: last.val.ece,
                    test_acc: h.test.accuracy,
                    test_ece: h.test.ece,
                    wall_clock_s: h.wall_clock_s,
                    steps: h.steps,
                })
            })
            .collect()
    }

    /// Sweep `lambda` over `grid` for `objective`.
    pub fn lambda_sweep(
        &self,
        objective: CalibrationObjective,
        grid: &[f64],
    ) -> Result<SelectionResult> {
        if grid.is_empty() {
            return Err(Error::config("lambda grid is empty"));
        }
        let configs = grid
            .iter()
            .map(|&lambda| CalibrationObjectiveSpec::new(objective, lambda))
            .collect::<Result<Vec<_>>>()?;
        let trials = self.run_trials(&configs)?;
        Ok(select(trials, self.baseline_val_acc(), configs.len()))
    }

    /// Sweep the inner hyperparameter of MMCE (kernel width) or SB-ECE
    /// (temperature, bins fixed at 15) at a fixed `lambda`.
    ///
    /// `prior_runs` is the lambda sweep's run count; the result reports the
    /// combined total.
    pub fn inner_hparam_sweep(
        &self,
        objective: CalibrationObjective,
        lambda: f64,
        inner_grid: &[f64],
        prior_runs: usize,
    ) -> Result<SelectionResult> {
        let configs = inner_configs(objective, lambda, inner_grid)?;
        let trials = self.run_trials(&configs)?;
        Ok(select(
            trials,
            self.baseline_val_acc(),
            prior_runs + configs.len(),
        ))
    }
}

/// The configurations an inner sweep trains.
pub fn inner_configs(
    objective: CalibrationObjective,
    lambda: f64,
    inner_grid: &[f64],
) -> Result<Vec<CalibrationObjectiveSpec>> {
    if inner_grid.is_empty() {
        return Err(Error::config("inner grid is empty"));
    }
    inner_grid
        .iter()
        .map(|&v| {
            let inner = match objective {
                CalibrationObjective::Mmce { .. } => CalibrationObjective::Mmce { kernel_width: v },
                CalibrationObjective::SbEce { .. } => CalibrationObjective::SbEce {
                    num_bins: SB_ECE_BINS,
                    temperature: v,
                },
                other => {
                    return Err(Error::invalid(format!(
                        "objective `{}` has no inner hyperparameter to sweep",
                        other.name()
                    )))
                }
            };
            CalibrationObjectiveSpec::new(inner, lambda)
        })
        .collect()
}

/// Default inner grid for an objective, if it has one.
pub fn default_inner_grid(objective: &CalibrationObjective) -> Option<Vec<f64>> {
    match objective {
        CalibrationObjective::Mmce { .. } => Some(MMCE_WIDTH_GRID.to_vec()),
        CalibrationObjective::SbEce { .. } => Some(SB_ECE_TEMPERATURE_GRID.to_vec()),
        _ => None,
    }
}

/// Runs per seed for the full sequential protocol with the given grids.
pub fn planned_runs(
    objective: &CalibrationObjective,
    lambda_grid: &[f64],
    inner_grid: Option<&[f64]>,
) -> usize {
    match (objective, inner_grid) {
        (CalibrationObjective::Mmce { .. } | CalibrationObjective::SbEce { .. }, Some(g)) => {
            lambda_grid.len() + g.len()
        }
        _ => lambda_grid.len(),
    }
}

/// Full protocol: lambda sweep, then the inner sweep when the objective has
/// one. Returns both stages; the last one holds the final choice.
pub fn full_sweep(
    runner: &SweepRunner<'_>,
    objective: CalibrationObjective,
    lambda_grid: &[f64],
    inner_grid: Option<&[f64]>,
) -> Result<Vec<SelectionResult>> {
    let first = runner.lambda_sweep(objective, lambda_grid)?;
    let mut stages = vec![first];
    if let (Some(grid), CalibrationObjective::Mmce { .. } | CalibrationObjective::SbEce { .. }) =
        (inner_grid, objective)
    {
        let Some(chosen) = stages[0].chosen else {
            return Ok(stages);
        };
        let second =
            runner.inner_hparam_sweep(objective, chosen.lambda, grid, lambda_grid.len())?;
        stages.push(second);
    }
    Ok(stages)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(lambda: f64, seed: u64, val_acc: f64, val_ece: f64) -> TrialRecord {
        TrialRecord {
            config: CalibrationObjectiveSpec::new(CalibrationObjective::Esd, lambda).unwrap(),
            seed,
            val_acc,
            val_ece,
            test_acc: val_acc,
            test_ece: val_ece,
            wall_clock_s: 0.0,
            steps: 1,
        }
    }

    #[test]
    fn grid_sizes() {
        let grid = default_lambda_grid();
        assert_eq!(grid.len(), 14);
        assert!((grid[0] - 0.2).abs() < 1e-15 && grid[13] == 10.0);
        assert_eq!(planned_runs(&CalibrationObjective::Esd, &grid, None), 14);
        let mmce = CalibrationObjective::from_name("mmce").unwrap();
        assert_eq!(planned_runs(&mmce, &grid, Some(&MMCE_WIDTH_GRID)), 18);
        let sb = CalibrationObjective::from_name("sb_ece").unwrap();
        assert_eq!(planned_runs(&sb, &grid, Some(&SB_ECE_TEMPERATURE_GRID)), 18);
    }

    #[test]
    fn picks_lowest_ece_within_budget() {
        let trials = vec![
            record(0.2, 0, 0.90, 0.05),
            record(0.2, 1, 0.90, 0.05),
            record(1.0, 0, 0.89, 0.02),
            record(1.0, 1, 0.89, 0.02),
            record(5.0, 0, 0.80, 0.01),
            record(5.0, 1, 0.80, 0.01),
        ];
        let r = select(trials, 0.9, 3);
        assert_eq!(r.chosen.unwrap().lambda, 1.0);
        assert!(!r.candidates[2].eligible);
        assert_eq!(r.trials.len(), 6);
    }

    #[test]
    fn reports_failure_without_fallback() {
        let r = select(
            vec![record(1.0, 0, 0.5, 0.01), record(2.0, 0, 0.6, 0.0)],
            0.9,
            2,
        );
        assert!(r.chosen.is_none());
        assert!(r.failure.is_some());
        assert_eq!(r.candidates.len(), 2);
        assert!(matches!(r.require_choice(), Err(Error::Selection(_))));
    }

    #[test]
    fn zero_lambda_grid_selects_it() {
        let r = select(vec![record(0.0, 0, 0.9, 0.1)], 0.9, 1);
        assert_eq!(r.chosen.unwrap().lambda, 0.0);
    }

    #[test]
    fn inner_sweep_rejects_esd() {
        assert!(matches!(
            inner_configs(CalibrationObjective::Esd, 1.0, &MMCE_WIDTH_GRID),
            Err(Error::InvalidInput(_))
        ));
        let sb = inner_configs(
            CalibrationObjective::from_name("sb_ece").unwrap(),
            2.0,
            &SB_ECE_TEMPERATURE_GRID,
        )
        .unwrap();
        assert!(sb.iter().all(|c| matches!(
            c.objective,
            CalibrationObjective::SbEce { num_bins: 15, .. }
        )));
    }
}
