//! Calibration metrics over [`PredictionBatch`]es.
//!
//! Trainable metrics return a [`MetricValueWithGrad`] whose gradient is taken
//! with respect to each sample's confidence. Comparisons (bin membership,
//! `z_j <= z_i`) are treated as constants, so the gradient is the true
//! derivative wherever those comparisons are locally constant.
//!
//! [`PredictionBatch`]: crate::data::PredictionBatch

mod binned;
mod cumulative;
mod esd;
mod mmce;
mod soft_binned;

pub use binned::{ece, ece_soft_loss};
pub use cumulative::{cumulative_curves, cumulative_point, d_alpha, CurvePoint};
pub use esd::{esd_gradient, esd_naive, esd_unbiased, EsdParts};
pub use mmce::mmce;
pub use soft_binned::sb_ece;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this many terms sums switch to pairwise (tree) accumulation.
pub const PAIRWISE_THRESHOLD: usize = 4096;
const PAIRWISE_BLOCK: usize = 128;

/// Sum `f(0) + ... + f(n-1)` in a fixed order: left to right for small `n`,
/// pairwise for `n > PAIRWISE_THRESHOLD`.
#[inline]
pub(crate) fn sum_by<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    if n <= PAIRWISE_THRESHOLD {
        (0..n).map(&f).sum()
    } else {
        pairwise(0, n, &f)
    }
}

fn pairwise<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
    if hi - lo <= PAIRWISE_BLOCK {
        (lo..hi).map(f).sum()
    } else {
        let mid = lo + (hi - lo) / 2;
        pairwise(lo, mid, f) + pairwise(mid, hi, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricValueWithGrad {
    pub value: f64,
    /// d value / d confidence_i, one entry per sample.
    pub grad_confidence: Vec<f64>,
    /// False when some sample sits on a tie, bin edge or absolute-value kink,
    /// where the returned gradient is only a subgradient.
    pub exact_gradient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EceConfig {
    pub num_bins: usize,
}

impl EceConfig {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::invalid("ECE needs at least one bin"));
        }
        Ok(Self { num_bins })
    }
}

impl Default for EceConfig {
    fn default() -> Self {
        Self { num_bins: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmceConfig {
    pub kernel_width: f64,
}

impl MmceConfig {
    pub fn new(kernel_width: f64) -> Result<Self> {
        if !(kernel_width > 0.0 && kernel_width.is_finite()) {
            return Err(Error::invalid(format!(
                "MMCE kernel width must be positive, got {kernel_width}"
            )));
        }
        Ok(Self { kernel_width })
    }
}

impl Default for MmceConfig {
    fn default() -> Self {
        Self { kernel_width: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbEceConfig {
    pub num_bins: usize,
    pub temperature: f64,
}

impl SbEceConfig {
    pub fn new(num_bins: usize, temperature: f64) -> Result<Self> {
        if num_bins < 2 {
            return Err(Error::invalid("SB-ECE needs at least two bins"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "SB-ECE temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            num_bins,
            temperature,
        })
    }
}

impl Default for SbEceConfig {
    fn default() -> Self {
        Self {
            num_bins: 15,
            temperature: 0.01,
        }
    }
}
