//! Finite-difference helpers shared by unit tests.

use crate::data::PredictionBatch;

/// Relative error with an absolute floor for near-zero quantities.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Central differences of `f` with respect to each confidence.
pub fn central_diff_confidence<F>(batch: &PredictionBatch, h: f64, f: F) -> Vec<f64>
where
    F: Fn(&PredictionBatch) -> f64,
{
    let z = batch.confidence().to_vec();
    (0..z.len())
        .map(|i| {
            let mut up = z.clone();
            let mut down = z.clone();
            up[i] += h;
            down[i] -= h;
            let fu = f(&batch.with_confidence(up).unwrap());
            let fd = f(&batch.with_confidence(down).unwrap());
            (fu - fd) / (2.0 * h)
        })
        .collect()
}
