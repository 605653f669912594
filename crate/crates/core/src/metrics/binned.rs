use super::{EceConfig, MetricValueWithGrad};
use crate::data::PredictionBatch;

/// Index of the bin `(j/B, (j+1)/B]` holding `z`; `z = 0` goes to bin 0.
///
/// The arithmetic guess is corrected against the exact edges so values that
/// are representable edges (e.g. 0.95 with B = 20) land on the closed side.
pub(crate) fn bin_index(z: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut j = ((z * b).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    if j + 1 < bins && z > (j + 1) as f64 / b {
        j += 1;
    }
    if j > 0 && z <= j as f64 / b {
        j -= 1;
    }
    j
}

fn on_edge(z: f64, bins: usize) -> bool {
    let j = bin_index(z, bins);
    z == (j + 1) as f64 / bins as f64 || (j == 0 && z == 0.0)
}

/// Per-bin residual sums `sum_{i in bin} (correct_i - z_i)` and counts.
fn bin_residuals(batch: &PredictionBatch, bins: usize) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let mut residual = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    let mut member = Vec::with_capacity(batch.len());
    for (z, c) in batch.iter() {
        let j = bin_index(z, bins);
        residual[j] += f64::from(u8::from(c)) - z;
        count[j] += 1;
        member.push(j);
    }
    (residual, count, member)
}

/// Binned expected calibration error: `sum_j (n_j / N) |acc_j - conf_j|`.
pub fn ece(batch: &PredictionBatch, cfg: &EceConfig) -> f64 {
    let bins = cfg.num_bins;
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (z, c) in batch.iter() {
        let j = bin_index(z, bins);
        hits[j] += usize::from(c);
        conf[j] += z;
        count[j] += 1;
    }
    let n = batch.len() as f64;
    (0..bins)
        .filter(|&j| count[j] > 0)
        .map(|j| {
            let m = count[j] as f64;
            (m / n) * (hits[j] as f64 / m - conf[j] / m).abs()
        })
        .sum()
}

/// ECE as a training loss.
///
/// The value is [`ece`]. Bin membership is held fixed, so each sample's
/// gradient is `-(1/N) sign(sum over its bin of (correct - z))`; a bin whose
/// residual is exactly zero contributes a zero subgradient.
pub fn ece_soft_loss(batch: &PredictionBatch, cfg: &EceConfig) -> MetricValueWithGrad {
    let bins = cfg.num_bins;
    let (residual, count, member) = bin_residuals(batch, bins);
    let n = batch.len() as f64;
    let grad_confidence = member
        .iter()
        .map(|&j| {
            let s = residual[j];
            if s > 0.0 {
                -1.0 / n
            } else if s < 0.0 {
                1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    let kink = (0..bins).any(|j| count[j] > 0 && residual[j] == 0.0);
    let edge = batch.confidence().iter().any(|&z| on_edge(z, bins));
    MetricValueWithGrad {
        value: ece(batch, cfg),
        grad_confidence,
        exact_gradient: !(kink || edge),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff_confidence, rel_err};

    fn batch(z: &[f64], c: &[bool]) -> PredictionBatch {
        PredictionBatch::new(z.to_vec(), c.to_vec()).unwrap()
    }

    #[test]
    fn perfect_batch_is_zero() {
        let b = batch(&[1.0, 1.0, 1.0], &[true, true, true]);
        assert_eq!(ece(&b, &EceConfig::default()), 0.0);
        let g = ece_soft_loss(&b, &EceConfig::default());
        assert_eq!(g.value, 0.0);
        assert!(g.grad_confidence.iter().all(|&v| v == 0.0));
        assert!(!g.exact_gradient);
    }

    #[test]
    fn twenty_bins_same_bin() {
        let b = batch(&[0.95, 0.95], &[true, false]);
        assert_eq!(bin_index(0.95, 20), 18);
        assert!((ece(&b, &EceConfig::new(20).unwrap()) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn single_bin() {
        let b = batch(&[0.8, 0.6], &[true, false]);
        assert!((ece(&b, &EceConfig::new(1).unwrap()) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.1000001, 10), 1);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.5, 2), 0);
    }

    #[test]
    fn soft_loss_single_sample_gradient() {
        // |1 - z| at z = 0.7 has derivative -1.
        let b = batch(&[0.7], &[true]);
        let cfg = EceConfig::new(1).unwrap();
        let g = ece_soft_loss(&b, &cfg);
        assert!((g.value - 0.3).abs() < 1e-15);
        let fd = central_diff_confidence(&b, 1e-6, |bb| ece(bb, &cfg));
        assert!((fd[0] + 1.0).abs() < 1e-8);
        assert!((g.grad_confidence[0] - fd[0]).abs() < 1e-8);
        assert!(g.exact_gradient);
    }

    #[test]
    fn soft_loss_matches_finite_differences_away_from_edges() {
        let b = batch(
            &[0.12, 0.33, 0.37, 0.58, 0.61, 0.86, 0.91, 0.97],
            &[false, true, false, true, true, false, true, true],
        );
        let cfg = EceConfig::new(10).unwrap();
        let g = ece_soft_loss(&b, &cfg);
        assert!(g.exact_gradient);
        let fd = central_diff_confidence(&b, 1e-6, |bb| ece(bb, &cfg));
        for (a, f) in g.grad_confidence.iter().zip(&fd) {
            assert!(rel_err(*a, *f) < 1e-5, "{a} vs {f}");
        }
    }

    #[test]
    fn edge_sample_flags_inexact() {
        let b = batch(&[0.5, 0.73], &[true, false]);
        assert!(!ece_soft_loss(&b, &EceConfig::new(2).unwrap()).exact_gradient);
    }
}
