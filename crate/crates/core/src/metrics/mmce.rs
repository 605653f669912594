//! Maximum mean calibration error, unweighted, with a Laplacian kernel.
//!
//! `MMCE^2 = 1/N^2 sum_{i,j} r_i r_j exp(-|z_i - z_j| / phi)` with
//! residuals `r_i = correct_i - z_i`.

use super::{sum_by, MetricValueWithGrad, MmceConfig};
use crate::data::PredictionBatch;

/// Below this squared value the square-root gradient is clamped to zero.
const SQRT_FLOOR: f64 = 1e-18;

pub fn mmce(batch: &PredictionBatch, cfg: &MmceConfig) -> MetricValueWithGrad {
    let z = batch.confidence();
    let n = z.len();
    let phi = cfg.kernel_width;
    let r: Vec<f64> = batch
        .iter()
        .map(|(z, c)| f64::from(u8::from(c)) - z)
        .collect();
    let kernel = |i: usize, j: usize| (-(z[i] - z[j]).abs() / phi).exp();

    let nn = (n * n) as f64;
    let total = sum_by(n, |i| r[i] * sum_by(n, |j| r[j] * kernel(i, j)));
    let squared = (total / nn).max(0.0);
    let value = squared.sqrt();

    let mut ties = false;
    let grad_confidence = if squared <= SQRT_FLOOR {
        vec![0.0; n]
    } else {
        (0..n)
            .map(|k| {
                // dS/dz_k = -2 sum_j r_j k_kj (1 + r_k sign(z_k - z_j) / phi)
                let ds = -2.0
                    * sum_by(n, |j| {
                        let sign = if j == k {
                            0.0
                        } else {
                            (z[k] - z[j]).signum() * f64::from(u8::from(z[k] != z[j]))
                        };
                        r[j] * kernel(k, j) * (1.0 + r[k] * sign / phi)
                    });
                ds / (2.0 * nn * value)
            })
            .collect()
    };
    for i in 0..n {
        for j in (i + 1)..n {
            ties |= z[i] == z[j];
        }
    }
    MetricValueWithGrad {
        value,
        grad_confidence,
        exact_gradient: !ties && squared > SQRT_FLOOR,
    }
}
