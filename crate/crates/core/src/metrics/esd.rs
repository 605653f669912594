//! Expected squared difference (ESD) estimators.
//!
//! With `d_j = correct_j - z_j` and `g_ij = I(z_j <= z_i) d_j` for `j != i`:
//!
//! ```text
//! gbar_i = 1/(N-1) sum_{j!=i} g_ij
//! S2_i   = 1/(N-2) sum_{j!=i} (g_ij - gbar_i)^2
//! naive  = 1/N sum_i gbar_i^2
//! ESD    = 1/N sum_i [gbar_i^2 - S2_i / (N-1)]
//! ```
//!
//! The naive plug-in estimator is biased upward by `mean_i S2_i / (N-1)`; the
//! corrected one is unbiased for the population quantity
//! `E_{Z'}[ E[I(Z <= Z') (Y - Z)]^2 ]` and can be negative on a given batch.
//! Ties `z_j = z_i` count as `z_j <= z_i`.

use super::{sum_by, MetricValueWithGrad};
use crate::data::PredictionBatch;
use crate::error::{Error, Result};

/// Per-anchor statistics shared by both estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct EsdParts {
    /// `gbar_i`, the leave-one-out mean of `g_ij`.
    pub mean: Vec<f64>,
    /// `S2_i`, the leave-one-out sample variance of `g_ij` (zero when N < 3).
    pub variance: Vec<f64>,
}

impl EsdParts {
    /// `O(N log N)`: anchors are visited in confidence order and the sums
    /// over `z_j <= z_i` come from prefix sums over whole tie groups.
    pub fn compute(batch: &PredictionBatch) -> Self {
        let z = batch.confidence();
        let diff = differences(batch);
        let n = z.len();
        let nf = n as f64;
        let mut mean = vec![0.0; n];
        let mut variance = vec![0.0; n];
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let order = sorted_order(z);
        for group in order.chunk_by(|&a, &b| z[a] == z[b]) {
            for &j in group {
                sum += diff[j];
                sum_sq += diff[j] * diff[j];
            }
            for &i in group {
                let gbar = (sum - diff[i]) / (nf - 1.0);
                mean[i] = gbar;
                if n > 2 {
                    let centered = sum_sq - diff[i] * diff[i] - (nf - 1.0) * gbar * gbar;
                    variance[i] = centered.max(0.0) / (nf - 2.0);
                }
            }
        }
        Self { mean, variance }
    }
}

fn differences(batch: &PredictionBatch) -> Vec<f64> {
    batch
        .iter()
        .map(|(z, c)| f64::from(u8::from(c)) - z)
        .collect()
}

fn sorted_order(z: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]));
    order
}

fn has_ties(z: &[f64]) -> bool {
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).any(|w| w[0] == w[1])
}

/// Naive plug-in estimator. Requires `N >= 2`.
pub fn esd_naive(batch: &PredictionBatch) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::invalid(format!("naive ESD needs N >= 2, got {n}")));
    }
    let parts = EsdParts::compute(batch);
    Ok(sum_by(n, |i| parts.mean[i] * parts.mean[i]) / n as f64)
}

/// Gradient of the unbiased estimator with respect to each confidence.
///
/// Writing each anchor term as
/// `gbar_i^2 (N-1)/(N-2) - sum_{j!=i} g_ij^2 / ((N-1)(N-2))` and holding the
/// indicators fixed gives
///
/// ```text
/// dESD/dz_k = -(2 / (N (N-2))) sum_{i != k, z_k <= z_i} (gbar_i - d_k / (N-1))
/// ```
pub fn esd_gradient(batch: &PredictionBatch, parts: &EsdParts) -> Vec<f64> {
    let z = batch.confidence();
    let diff = differences(batch);
    let n = z.len();
    let nf = n as f64;
    let scale = -2.0 / (nf * (nf - 2.0));
    let order = sorted_order(z);
    let mut grad = vec![0.0; n];
    // Suffix sums over `z_i >= z_k`, whole tie groups at a time.
    let (mut tail_mean, mut tail_count) = (0.0, 0.0);
    for group in order.chunk_by(|&a, &b| z[a] == z[b]).rev() {
        for &i in group {
            tail_mean += parts.mean[i];
            tail_count += 1.0;
        }
        for &k in group {
            let shift = diff[k] / (nf - 1.0);
            grad[k] = scale * ((tail_mean - parts.mean[k]) - shift * (tail_count - 1.0));
        }
    }
    grad
}

/// Unbiased estimator with its stop-gradient gradient. Requires `N >= 3`.
pub fn esd_unbiased(batch: &PredictionBatch) -> Result<MetricValueWithGrad> {
    let n = batch.len();
    if n < 3 {
        return Err(Error::invalid(format!(
            "unbiased ESD needs N >= 3, got {n}"
        )));
    }
    let parts = EsdParts::compute(batch);
    let nf = n as f64;
    let value = sum_by(n, |i| {
        parts.mean[i] * parts.mean[i] - parts.variance[i] / (nf - 1.0)
    }) / nf;
    Ok(MetricValueWithGrad {
        value,
        grad_confidence: esd_gradient(batch, &parts),
        exact_gradient: !has_ties(batch.confidence()),
    })
}
