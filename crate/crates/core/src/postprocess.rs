//! Post-hoc calibration of saved logits: temperature and vector scaling.
//!
//! Both are fitted by minimizing validation NLL.

use serde::{Deserialize, Serialize};

use crate::data::{softmax_into, ProbVector};
use crate::error::{Error, Result};
use crate::io::LogitDump;
use crate::nn::nll_loss_and_grad;

pub const MIN_TEMPERATURE: f64 = 0.05;
pub const MAX_TEMPERATURE: f64 = 10.0;
/// Golden-section stopping width, in `ln T`.
const LN_T_TOL: f64 = 1e-4;

const VS_LR: f64 = 0.01;
const VS_MAX_ITERS: usize = 2000;
const VS_GRAD_TOL: f64 = 1e-7;
const VS_MAX_INCREASES: usize = 10;
const VS_MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub model: TemperatureModel,
    pub nll_before: f64,
    pub nll_after: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorScaleModel {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorScaleFit {
    pub model: VectorScaleModel,
    pub iterations: usize,
    /// Validation NLL after each accepted iteration, starting at the identity.
    pub nll_trace: Vec<f64>,
}

fn scaled_nll(dump: &LogitDump, inv_t: f64) -> f64 {
    let scaled: Vec<f64> = dump.logits.iter().map(|l| l * inv_t).collect();
    nll_loss_and_grad(&scaled, &dump.labels, dump.num_classes)
        .map(|(l, _)| l)
        .unwrap_or(f64::INFINITY)
}

fn single_class(labels: &[usize]) -> bool {
    labels.windows(2).all(|w| w[0] == w[1])
}

/// Fit `T` by golden-section search on `ln T` over `[ln 0.05, ln 10]`.
///
/// A validation set with a single class yields `T = 1` and a warning.
pub fn fit_temperature(val: &LogitDump) -> Result<TemperatureFit> {
    if val.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let nll_before = scaled_nll(val, 1.0);
    if single_class(&val.labels) {
        return Ok(TemperatureFit {
            model: TemperatureModel { temperature: 1.0 },
            nll_before,
            nll_after: nll_before,
            warning: Some("validation labels contain a single class; keeping T = 1".into()),
        });
    }
    let f = |u: f64| scaled_nll(val, (-u).exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LN_T_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut u = 0.5 * (a + b);
    let mut nll_after = f(u);
    // The search is only locally optimal; never return something worse than T = 1.
    if nll_after > nll_before {
        u = 0.0;
        nll_after = nll_before;
    }
    Ok(TemperatureFit {
        model: TemperatureModel {
            temperature: u.exp(),
        },
        nll_before,
        nll_after,
        warning: None,
    })
}

impl TemperatureModel {
    pub fn scale_logits(&self, logits: &[f64]) -> Vec<f64> {
        logits.iter().map(|l| l / self.temperature).collect()
    }

    pub fn apply(&self, dump: &LogitDump) -> Vec<ProbVector> {
        probabilities(&self.scale_logits(&dump.logits), dump.num_classes)
    }

    pub fn apply_dump(&self, dump: &LogitDump) -> LogitDump {
        LogitDump {
            num_classes: dump.num_classes,
            logits: self.scale_logits(&dump.logits),
            labels: dump.labels.clone(),
        }
    }
}

fn probabilities(logits: &[f64], classes: usize) -> Vec<ProbVector> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut p = vec![0.0; classes];
            softmax_into(row, &mut p);
            ProbVector::new(p).expect("softmax output is a distribution")
        })
        .collect()
}

impl VectorScaleModel {
    pub fn identity(classes: usize) -> Self {
        Self {
            scale: vec![1.0; classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn transform(&self, logits: &[f64]) -> Result<Vec<f64>> {
        let c = self.scale.len();
        if c == 0 || !logits.len().is_multiple_of(c) || self.bias.len() != c {
            return Err(Error::invalid("vector scaling shape mismatch"));
        }
        Ok(logits
            .chunks_exact(c)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.scale)
                    .zip(&self.bias)
                    .map(|((l, w), b)| w * l + b)
            })
            .collect())
    }

    pub fn apply(&self, dump: &LogitDump) -> Result<Vec<ProbVector>> {
        Ok(probabilities(
            &self.transform(&dump.logits)?,
            dump.num_classes,
        ))
    }

    pub fn apply_dump(&self, dump: &LogitDump) -> Result<LogitDump> {
        Ok(LogitDump {
            num_classes: dump.num_classes,
            logits: self.transform(&dump.logits)?,
            labels: dump.labels.clone(),
        })
    }

    fn nll_and_grad(&self, dump: &LogitDump) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let c = dump.num_classes;
        let (nll, g) = nll_loss_and_grad(&self.transform(&dump.logits)?, &dump.labels, c)?;
        let mut gw = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for (row, grow) in dump.rows().zip(g.chunks_exact(c)) {
            for k in 0..c {
                gw[k] += grow[k] * row[k];
                gb[k] += grow[k];
            }
        }
        Ok((nll, gw, gb))
    }
}

/// Fit per-class scale and bias by gradient descent from the identity.
///
/// Steps start at `lr = 0.01` and are halved until the NLL does not increase;
/// the shrunken step carries over. Stops after 2000 iterations, when the
/// gradient norm falls below `1e-7`, or when no decreasing step exists.
/// Ten consecutive iterations whose first trial step increased the NLL
/// count as divergence.
pub fn fit_vector_scaling(val: &LogitDump) -> Result<VectorScaleFit> {
    if val.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let c = val.num_classes;
    let mut model = VectorScaleModel::identity(c);
    let (mut nll, mut gw, mut gb) = model.nll_and_grad(val)?;
    let mut trace = vec![nll];
    let mut step = VS_LR;
    let mut increases = 0usize;
    let mut iterations = 0usize;
    while iterations < VS_MAX_ITERS {
        let norm = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
        if norm < VS_GRAD_TOL {
            break;
        }
        iterations += 1;
        let mut accepted = None;
        let mut first_try_increased = false;
        for halving in 0..=VS_MAX_HALVINGS {
            let candidate = VectorScaleModel {
                scale: model
                    .scale
                    .iter()
                    .zip(&gw)
                    .map(|(w, g)| w - step * g)
                    .collect(),
                bias: model
                    .bias
                    .iter()
                    .zip(&gb)
                    .map(|(b, g)| b - step * g)
                    .collect(),
            };
            let (cand_nll, cgw, cgb) = candidate.nll_and_grad(val)?;
            if cand_nll.is_finite() && cand_nll <= nll {
                accepted = Some((candidate, cand_nll, cgw, cgb));
                break;
            }
            if halving == 0 {
                first_try_increased = true;
            }
            step *= 0.5;
        }
        increases = if first_try_increased {
            increases + 1
        } else {
            0
        };
        if increases >= VS_MAX_INCREASES {
            return Err(Error::FitDiverged {
                iterations,
                last_nll: nll,
                trace,
            });
        }
        match accepted {
            Some((m, n, w, b)) => {
                model = m;
                nll = n;
                gw = w;
                gb = b;
                trace.push(nll);
            }
            None => break,
        }
    }
    Ok(VectorScaleFit {
        model,
        iterations,
        nll_trace: trace,
    })
}
