use serde::Serialize;

use crate::data::PredictionBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub cum_acc: f64,
    pub cum_conf: f64,
    pub d_alpha: f64,
}

/// `(cum_acc(alpha), cum_conf(alpha))`: the empirical means of
/// `I(z <= alpha, correct)` and `z I(z <= alpha)`.
pub fn cumulative_point(batch: &PredictionBatch, alpha: f64) -> (f64, f64) {
    let mut hits = 0usize;
    let mut conf = 0.0;
    for (z, c) in batch.iter() {
        if z <= alpha {
            hits += usize::from(c);
            conf += z;
        }
    }
    let n = batch.len() as f64;
    (hits as f64 / n, conf / n)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha = {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `|mean_i I(z_i <= alpha) (correct_i - z_i)|`, computed as
/// `|cum_acc(alpha) - cum_conf(alpha)|`.
pub fn d_alpha(batch: &PredictionBatch, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let (acc, conf) = cumulative_point(batch, alpha);
    Ok((acc - conf).abs())
}

pub fn cumulative_curves(batch: &PredictionBatch, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    grid.iter()
        .map(|&alpha| {
            check_alpha(alpha)?;
            let (cum_acc, cum_conf) = cumulative_point(batch, alpha);
            Ok(CurvePoint {
                alpha,
                cum_acc,
                cum_conf,
                d_alpha: (cum_acc - cum_conf).abs(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(z: &[f64], c: &[bool]) -> PredictionBatch {
        PredictionBatch::new(z.to_vec(), c.to_vec()).unwrap()
    }

    #[test]
    fn alpha_zero_is_empty() {
        let b = batch(&[0.3, 0.9], &[true, false]);
        assert_eq!(d_alpha(&b, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn alpha_one_hand_value() {
        let b = batch(&[0.9, 0.8], &[false, true]);
        assert!((d_alpha(&b, 1.0).unwrap() - 0.35).abs() < 1e-15);
    }

    #[test]
    fn matching_batch() {
        let b = batch(&[0.5, 0.5], &[true, false]);
        assert_eq!(d_alpha(&b, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_alpha_out_of_range() {
        let b = batch(&[0.5], &[true]);
        assert!(d_alpha(&b, 1.5).is_err());
        assert!(cumulative_curves(&b, &[0.2, -0.1]).is_err());
    }

    #[test]
    fn full_mass_limit() {
        let b = batch(&[0.9, 0.6, 0.5], &[true, false, true]);
        let p = cumulative_curves(&b, &[1.0]).unwrap()[0];
        assert_eq!(p.cum_acc, b.accuracy());
        assert!((p.cum_conf - b.mean_confidence()).abs() < 1e-15);
    }

    #[test]
    fn curves_consistent_with_d_alpha() {
        let b = batch(&[0.9, 0.6, 0.5], &[true, false, true]);
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let curves = cumulative_curves(&b, &grid).unwrap();
        for w in curves.windows(2) {
            assert!(w[1].cum_acc >= w[0].cum_acc && w[1].cum_conf >= w[0].cum_conf);
        }
        for p in &curves {
            assert_eq!(p.d_alpha, d_alpha(&b, p.alpha).unwrap());
        }
        // alpha = 0.55 covers only (0.5, T): |1/3 - 0.5/3|.
        let p = cumulative_curves(&b, &[0.55]).unwrap()[0];
        assert!((p.d_alpha - 0.5 / 3.0).abs() < 1e-15);
    }
}
