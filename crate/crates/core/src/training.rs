//! Interleaved training of `NLL(train') + lambda * objective(cal')`.
//!
//! Every optimizer step takes an NLL gradient on a minibatch of the NLL data
//! and, when the objective is active, adds `lambda` times the objective's
//! gradient on an independently drawn minibatch of the calibration subset.
//! Calibration minibatches have `min(batch_size, |cal'|)` samples and cycle
//! through `cal'`, reshuffling whenever fewer than a full batch remain.
//!
//! An inactive objective (`none`, or any objective with `lambda = 0`) reduces
//! the loop to plain NLL training on the undivided train split
//! (`train' + cal'`), step for step identical to the baseline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_from_logits, Dataset, Splits};
use crate::error::{Error, Result};
use crate::io::LogitDump;
use crate::metrics::{ece, EceConfig};
use crate::nn::{
    calibration_loss_grad_to_logits, nll_loss_and_grad, softmax_rows, AdamW, AdamWConfig,
    DenseNetwork, ParamBuffer,
};
use crate::objective::{CalibrationObjective, CalibrationObjectiveSpec};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub objective: CalibrationObjectiveSpec,
    pub eval_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            hidden: vec![64, 64],
            objective: CalibrationObjectiveSpec::none(),
            eval_bins: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("`epochs` must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("`batch_size` must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("`lr` must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("`weight_decay` must be >= 0"));
        }
        if self.eval_bins == 0 {
            return Err(Error::config("`eval_bins` must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        self.objective.validate()
    }

    pub fn layer_sizes(&self, features: usize, classes: usize) -> Vec<usize> {
        std::iter::once(features)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Fresh network for this config, seeded from `seed`.
    pub fn init_network(&self, features: usize, classes: usize) -> Result<DenseNetwork> {
        DenseNetwork::init(
            &self.layer_sizes(features, classes),
            derive_seed(self.seed, 0),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
    /// Mean calibration-objective value over the epoch's calibration batches.
    pub objective: Option<f64>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub test: SplitMetrics,
    pub steps: u64,
    pub wall_clock_s: f64,
}

impl TrainHistory {
    /// Copy with all timing fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        h.wall_clock_s = 0.0;
        h.epochs.iter_mut().for_each(|e| e.wall_clock_s = 0.0);
        h
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("history has at least one epoch")
    }
}

/// Accuracy, binned ECE and mean NLL of a network on a dataset.
pub fn evaluate(net: &DenseNetwork, data: &Dataset, bins: usize) -> Result<SplitMetrics> {
    let logits = net.logits(&data.feature_matrix())?;
    let labels = data.labels();
    let (nll, _) = nll_loss_and_grad(&logits, &labels, data.num_classes)?;
    let batch = batch_from_logits(&logits, &labels)?;
    Ok(SplitMetrics {
        accuracy: batch.accuracy(),
        ece: ece(&batch, &EceConfig::new(bins)?),
        nll,
    })
}

pub fn logit_dump(net: &DenseNetwork, data: &Dataset) -> Result<LogitDump> {
    let logits = net.logits(&data.feature_matrix())?;
    LogitDump::new(data.num_classes, logits, data.labels())
}

/// Gradients of one interleaved step, kept apart by source.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub nll_loss: f64,
    pub nll: ParamBuffer,
    /// Objective value and unweighted gradient from the calibration batch.
    pub calibration: Option<(f64, ParamBuffer)>,
}

impl StepGradients {
    /// `nll + lambda * calibration`.
    pub fn combined(&self, lambda: f64) -> ParamBuffer {
        let mut total = self.nll.clone();
        if let Some((_, g)) = &self.calibration {
            total.add_scaled(g, lambda);
        }
        total
    }
}

fn gather(data: &Dataset, rows: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::with_capacity(rows.len() * data.num_features);
    let mut y = Vec::with_capacity(rows.len());
    for &r in rows {
        let ex = &data.examples[r];
        x.extend_from_slice(&ex.features);
        y.push(ex.label);
    }
    (x, y)
}

/// NLL gradient on `train_rows` of `train` and, if given, the objective's
/// gradient on `cal_rows` of `cal`. Neither term sees the other's data.
pub fn interleaved_gradient(
    net: &DenseNetwork,
    train: &Dataset,
    train_rows: &[usize],
    calibration: Option<(&Dataset, &[usize], &CalibrationObjective)>,
) -> Result<StepGradients> {
    let classes = net.num_classes();
    let (x, y) = gather(train, train_rows);
    let (logits, trace) = net.forward(&x)?;
    let (nll_loss, dlogits) = nll_loss_and_grad(&logits, &y, classes)?;
    let nll = net.backward(&trace, &dlogits)?;
    let calibration = match calibration {
        Some((cal, rows, objective)) => {
            let (cx, cy) = gather(cal, rows);
            let (clogits, ctrace) = net.forward(&cx)?;
            let probs = softmax_rows(&clogits, classes);
            let (value, dlogits) =
                calibration_loss_grad_to_logits(&probs, &cy, classes, objective)?;
            Some((value, net.backward(&ctrace, &dlogits)?))
        }
        None => None,
    };
    Ok(StepGradients {
        nll_loss,
        nll,
        calibration,
    })
}

/// Endless stream of full-size calibration minibatches.
struct CalibrationCycler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: SplitMix64,
}

impl CalibrationCycler {
    fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        Self {
            order,
            pos: 0,
            batch,
            rng,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let rows = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        rows
    }
}

/// Train `net` on `splits` according to `cfg`.
pub fn train(
    splits: &Splits,
    net: DenseNetwork,
    cfg: &TrainConfig,
) -> Result<(DenseNetwork, TrainHistory)> {
    train_with_state(splits, net, cfg).map(|(net, _, history)| (net, history))
}

/// [`train`], also returning the final optimizer state.
pub fn train_with_state(
    splits: &Splits,
    mut net: DenseNetwork,
    cfg: &TrainConfig,
) -> Result<(DenseNetwork, AdamW, TrainHistory)> {
    cfg.validate()?;
    let spec = cfg.objective;
    if net.num_inputs() != splits.train.num_features
        || net.num_classes() != splits.train.num_classes
    {
        return Err(Error::invalid("network shape does not match the dataset"));
    }

    let nll_data = if !spec.is_active() {
        splits.full_train()
    } else {
        splits.train.clone()
    };
    let mut cycler = if spec.is_active() {
        let size = cfg.batch_size.min(splits.cal.len());
        let need = spec.objective.min_batch();
        if size < need {
            return Err(Error::config(format!(
                "calibration minibatch has {size} samples but `{}` needs at least {need}; \
                 enlarge the calibration split or the batch size",
                spec.objective.name()
            )));
        }
        Some(CalibrationCycler::new(
            splits.cal.len(),
            size,
            derive_seed(cfg.seed, 2),
        ))
    } else {
        None
    };

    let mut opt = AdamW::new(&net, cfg.optimizer());
    let mut shuffle_rng = SplitMix64::new(derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..nll_data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut objective_sum = 0.0;
        let mut objective_steps = 0usize;
        for rows in order.chunks(cfg.batch_size) {
            let cal_rows = cycler.as_mut().map(|c| c.next_batch().to_vec());
            let step = interleaved_gradient(
                &net,
                &nll_data,
                rows,
                cal_rows
                    .as_deref()
                    .map(|r| (&splits.cal, r, &spec.objective)),
            )?;
            if let Some((value, _)) = &step.calibration {
                objective_sum += value;
                objective_steps += 1;
            }
            opt.step(&mut net, &step.combined(spec.lambda))?;
        }
        if net.params().slices().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "parameters became non-finite in epoch {epoch}"
            )));
        }
        epochs.push(EpochRecord {
            epoch,
            train: evaluate(&net, &nll_data, cfg.eval_bins)?,
            val: evaluate(&net, &splits.val, cfg.eval_bins)?,
            objective: (objective_steps > 0).then(|| objective_sum / objective_steps as f64),
            wall_clock_s: epoch_start.elapsed().as_secs_f64(),
        });
    }

    let history = TrainHistory {
        epochs,
        test: evaluate(&net, &splits.test, cfg.eval_bins)?,
        steps: opt.step,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok((net, opt, history))
}

/// Initialize from `cfg` and train.
pub fn train_fresh(splits: &Splits, cfg: &TrainConfig) -> Result<(DenseNetwork, TrainHistory)> {
    let net = cfg.init_network(splits.train.num_features, splits.train.num_classes)?;
    train(splits, net, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_dataset, SplitSpec, SyntheticSpec};

    fn small_splits() -> Splits {
        let d = generate_synthetic(&SyntheticSpec {
            per_class: 60,
            seed: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        split_dataset(
            &d,
            &SplitSpec {
                train: 0.6,
                val: 0.2,
                test: 0.2,
                interleave: 0.2,
                seed: 1,
            },
        )
        .unwrap()
    }

    fn quick(objective: CalibrationObjectiveSpec) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            hidden: vec![8],
            objective,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn history_shape_and_determinism() {
        let splits = small_splits();
        let cfg = quick(CalibrationObjectiveSpec::new(CalibrationObjective::Esd, 1.0).unwrap());
        let (net_a, a) = train_fresh(&splits, &cfg).unwrap();
        let (net_b, b) = train_fresh(&splits, &cfg).unwrap();
        assert_eq!(a.epochs.len(), 3);
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(net_a, net_b);
        assert!(a.epochs.iter().all(|e| e.objective.is_some()));
        let per_epoch = splits.train.len().div_ceil(16) as u64;
        assert_eq!(a.steps, 3 * per_epoch);
    }

    #[test]
    fn baseline_uses_full_train_split() {
        let splits = small_splits();
        let (_, h) = train_fresh(&splits, &quick(CalibrationObjectiveSpec::none())).unwrap();
        let per_epoch = (splits.train.len() + splits.cal.len()).div_ceil(16) as u64;
        assert_eq!(h.steps, 3 * per_epoch);
        assert!(h.epochs.iter().all(|e| e.objective.is_none()));
    }

    #[test]
    fn zero_lambda_matches_baseline() {
        let splits = small_splits();
        let (net_a, a) = train_fresh(&splits, &quick(CalibrationObjectiveSpec::none())).unwrap();
        let esd0 = CalibrationObjectiveSpec::new(CalibrationObjective::Esd, 0.0).unwrap();
        let (net_b, b) = train_fresh(&splits, &quick(esd0)).unwrap();
        assert_eq!(net_a, net_b);
        assert_eq!(a.without_timing(), b.without_timing());
    }

    #[test]
    fn esd_rejects_tiny_calibration_batches() {
        let splits = small_splits();
        let mut cfg = quick(CalibrationObjectiveSpec::new(CalibrationObjective::Esd, 1.0).unwrap());
        cfg.batch_size = 2;
        assert!(matches!(train_fresh(&splits, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn cycler_emits_full_batches() {
        let mut c = CalibrationCycler::new(10, 4, 1);
        for _ in 0..20 {
            let b = c.next_batch().to_vec();
            assert_eq!(b.len(), 4);
            let mut s = b.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 4);
        }
    }
}
