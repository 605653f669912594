//! Soft-binned ECE.
//!
//! Each sample spreads over `M` bins centred at `(j + 0.5) / M` with weights
//! `u_j(z) = softmax_j(-(z - c_j)^2 / T)`. Writing `A_j = sum_i u_ij correct_i`
//! and `F_j = sum_i u_ij z_i`, the per-bin mass-weighted gap
//! `(W_j / N) |A_j / W_j - F_j / W_j|` reduces to `|A_j - F_j| / N`.

use super::{MetricValueWithGrad, SbEceConfig};
use crate::data::PredictionBatch;

/// Bins whose soft mass `W_j / N` falls below this are skipped.
const MIN_MASS: f64 = 1e-12;

/// Soft memberships of one confidence and their derivatives in `z`.
fn memberships(z: f64, centres: &[f64], t: f64, u: &mut [f64], du: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (uj, &c) in u.iter_mut().zip(centres) {
        *uj = -(z - c) * (z - c) / t;
        max = max.max(*uj);
    }
    let mut total = 0.0;
    for uj in u.iter_mut() {
        *uj = (*uj - max).exp();
        total += *uj;
    }
    let mut mean_dlogit = 0.0;
    for (uj, &c) in u.iter_mut().zip(centres) {
        *uj /= total;
        mean_dlogit += *uj * (-2.0 * (z - c) / t);
    }
    for ((duj, &uj), &c) in du.iter_mut().zip(u.iter()).zip(centres) {
        *duj = uj * (-2.0 * (z - c) / t - mean_dlogit);
    }
}

pub fn sb_ece(batch: &PredictionBatch, cfg: &SbEceConfig) -> MetricValueWithGrad {
    let m = cfg.num_bins;
    let t = cfg.temperature;
    let n = batch.len();
    let nf = n as f64;
    let centres: Vec<f64> = (0..m).map(|j| (j as f64 + 0.5) / m as f64).collect();

    let mut u = vec![0.0; n * m];
    let mut du = vec![0.0; n * m];
    for (i, &z) in batch.confidence().iter().enumerate() {
        memberships(
            z,
            &centres,
            t,
            &mut u[i * m..(i + 1) * m],
            &mut du[i * m..(i + 1) * m],
        );
    }

    let mut mass = vec![0.0; m];
    let mut gap = vec![0.0; m];
    for (i, (z, c)) in batch.iter().enumerate() {
        let r = f64::from(u8::from(c)) - z;
        for j in 0..m {
            mass[j] += u[i * m + j];
            gap[j] += u[i * m + j] * r;
        }
    }
    let active: Vec<bool> = mass.iter().map(|&w| w / nf >= MIN_MASS).collect();
    let value = (0..m)
        .filter(|&j| active[j])
        .map(|j| gap[j].abs())
        .sum::<f64>()
        / nf;

    let sign: Vec<f64> = (0..m)
        .map(|j| {
            if !active[j] || gap[j] == 0.0 {
                0.0
            } else {
                gap[j].signum()
            }
        })
        .collect();
    let grad_confidence = batch
        .iter()
        .enumerate()
        .map(|(i, (z, c))| {
            let r = f64::from(u8::from(c)) - z;
            (0..m)
                .map(|j| sign[j] * (du[i * m + j] * r - u[i * m + j]))
                .sum::<f64>()
                / nf
        })
        .collect();
    let kink = (0..m).any(|j| active[j] && gap[j] == 0.0);
    MetricValueWithGrad {
        value,
        grad_confidence,
        exact_gradient: !kink,
    }
}
