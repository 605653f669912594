//! Calibration toolkit built around the expected squared difference (ESD)
//! calibration objective.
//!
//! * [`data`] and [`io`]: datasets, splits, prediction batches, file formats.
//! * [`metrics`]: ECE, cumulative curves, naive and unbiased ESD, MMCE, SB-ECE.
//! * [`nn`]: a dense ReLU classifier with hand-written backprop and AdamW.
//! * [`training`]: interleaved NLL + calibration training, sweeps and model
//!   selection.
//! * [`postprocess`]: temperature and vector scaling.
//! * [`oracle`]: synthetic calibration models with quadrature ground truth and
//!   Monte Carlo studies of the ESD estimators.

pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod oracle;
pub mod postprocess;
pub mod rng;
pub mod selection;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
