//! Choice of auxiliary calibration loss.

use serde::{Deserialize, Serialize};

use crate::data::PredictionBatch;
use crate::error::{Error, Result};
use crate::metrics::{
    ece_soft_loss, esd_unbiased, mmce, sb_ece, EceConfig, MetricValueWithGrad, MmceConfig,
    SbEceConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationObjective {
    None,
    Esd,
    Mmce { kernel_width: f64 },
    SbEce { num_bins: usize, temperature: f64 },
    EceSoft { num_bins: usize },
}

impl CalibrationObjective {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Esd => "esd",
            Self::Mmce { .. } => "mmce",
            Self::SbEce { .. } => "sb_ece",
            Self::EceSoft { .. } => "ece_soft",
        }
    }

    /// Default hyperparameters for a kind name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "none" => Self::None,
            "esd" => Self::Esd,
            "mmce" => Self::Mmce {
                kernel_width: MmceConfig::default().kernel_width,
            },
            "sb_ece" | "sbece" => {
                let d = SbEceConfig::default();
                Self::SbEce {
                    num_bins: d.num_bins,
                    temperature: d.temperature,
                }
            }
            "ece_soft" | "ece" => Self::EceSoft {
                num_bins: EceConfig::default().num_bins,
            },
            other => {
                return Err(Error::config(format!(
                    "unknown objective `{other}` (expected none, esd, mmce, sb_ece, ece_soft)"
                )))
            }
        })
    }

    /// Smallest calibration minibatch the objective is defined on.
    pub fn min_batch(&self) -> usize {
        match self {
            Self::Esd => 3,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Mmce { kernel_width } => MmceConfig::new(kernel_width).map(drop),
            Self::SbEce {
                num_bins,
                temperature,
            } => SbEceConfig::new(num_bins, temperature).map(drop),
            Self::EceSoft { num_bins } => EceConfig::new(num_bins).map(drop),
            Self::None | Self::Esd => Ok(()),
        }
    }

    /// Value and confidence-gradient on a batch. `None` is not differentiable.
    pub fn evaluate(&self, batch: &PredictionBatch) -> Result<MetricValueWithGrad> {
        match *self {
            Self::None => Err(Error::invalid("objective `none` has no gradient")),
            Self::Esd => esd_unbiased(batch),
            Self::Mmce { kernel_width } => Ok(mmce(batch, &MmceConfig::new(kernel_width)?)),
            Self::SbEce {
                num_bins,
                temperature,
            } => Ok(sb_ece(batch, &SbEceConfig::new(num_bins, temperature)?)),
            Self::EceSoft { num_bins } => Ok(ece_soft_loss(batch, &EceConfig::new(num_bins)?)),
        }
    }
}

/// An objective together with its weight `lambda` in
/// `NLL + lambda * objective`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationObjectiveSpec {
    #[serde(flatten)]
    pub objective: CalibrationObjective,
    pub lambda: f64,
}

impl CalibrationObjectiveSpec {
    pub fn none() -> Self {
        Self {
            objective: CalibrationObjective::None,
            lambda: 0.0,
        }
    }

    pub fn new(objective: CalibrationObjective, lambda: f64) -> Result<Self> {
        let spec = Self { objective, lambda };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        self.objective.validate()
    }

    /// True when calibration minibatches contribute to the update.
    pub fn is_active(&self) -> bool {
        self.objective != CalibrationObjective::None && self.lambda > 0.0
    }
}
