//! Synthetic calibration models with known ESD, and Monte Carlo studies of
//! the ESD estimators against them.
//!
//! A model is a confidence density `p` on `[0, 1]` together with a
//! calibration function `c(z) = P(correct | Z = z)`. Its population ESD is
//!
//! ```text
//! D(a)  = int_0^a (c(z) - z) p(z) dz
//! ESD   = int_0^1 D(a)^2 p(a) da
//! ```
//!
//! evaluated by nested adaptive Simpson quadrature.
//!
//! Every study derives one seed per replication from the model seed with
//! [`derive_seed`], runs replications in parallel and aggregates in
//! replication order, so reports are bit-for-bit reproducible.

use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::data::PredictionBatch;
use crate::error::{Error, Result};
use crate::metrics::{esd_naive, esd_unbiased};
use crate::rng::{derive_seed, SplitMix64};

/// Absolute tolerance of the outer ESD integral.
pub const QUADRATURE_TOL: f64 = 1e-10;
const INNER_TOL: f64 = 1e-13;
const MAX_DEPTH: u32 = 48;
const TOL_FLOOR: f64 = 1e-20;
/// Acceptance band, in standard errors.
pub const Z_BAND: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ConfidenceDensity {
    Uniform,
    /// Shape parameters must be `>= 1` so the density stays bounded.
    Beta {
        a: f64,
        b: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CalibrationFunction {
    Identity,
    Power {
        gamma: f64,
    },
    /// `clamp(intercept + slope * z, 0, 1)`.
    AffineClamped {
        slope: f64,
        intercept: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCalibrationModel {
    pub density: ConfidenceDensity,
    pub calibration: CalibrationFunction,
    pub seed: u64,
}

impl ConfidenceDensity {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ConfidenceDensity::Uniform => Ok(()),
            ConfidenceDensity::Beta { a, b } => {
                if a.is_finite() && b.is_finite() && a >= 1.0 && b >= 1.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "beta density needs finite a, b >= 1, got ({a}, {b})"
                    )))
                }
            }
        }
    }

    pub fn pdf(&self, z: f64) -> f64 {
        if !(0.0..=1.0).contains(&z) {
            return 0.0;
        }
        match *self {
            ConfidenceDensity::Uniform => 1.0,
            ConfidenceDensity::Beta { a, b } => {
                let log = (a - 1.0) * z.ln() + (b - 1.0) * (1.0 - z).ln() - ln_beta(a, b);
                // 0 * ln 0 at the endpoints when a or b is exactly 1.
                if log.is_nan() {
                    (-ln_beta(a, b)).exp()
                } else {
                    log.exp()
                }
            }
        }
    }
}

impl CalibrationFunction {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CalibrationFunction::Identity => Ok(()),
            CalibrationFunction::Power { gamma } if gamma.is_finite() && gamma > 0.0 => Ok(()),
            CalibrationFunction::Power { gamma } => Err(Error::config(format!(
                "power calibration needs gamma > 0, got {gamma}"
            ))),
            CalibrationFunction::AffineClamped { slope, intercept }
                if slope.is_finite() && intercept.is_finite() =>
            {
                Ok(())
            }
            CalibrationFunction::AffineClamped { .. } => {
                Err(Error::config("affine calibration must be finite"))
            }
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            CalibrationFunction::Identity => z,
            CalibrationFunction::Power { gamma } => z.powf(gamma),
            CalibrationFunction::AffineClamped { slope, intercept } => {
                (intercept + slope * z).clamp(0.0, 1.0)
            }
        }
    }
}

impl SyntheticCalibrationModel {
    pub fn new(
        density: ConfidenceDensity,
        calibration: CalibrationFunction,
        seed: u64,
    ) -> Result<Self> {
        density.validate()?;
        calibration.validate()?;
        Ok(Self {
            density,
            calibration,
            seed,
        })
    }

    pub fn uniform_power(gamma: f64, seed: u64) -> Result<Self> {
        Self::new(
            ConfidenceDensity::Uniform,
            CalibrationFunction::Power { gamma },
            seed,
        )
    }

    pub fn uniform_identity(seed: u64) -> Self {
        Self {
            density: ConfidenceDensity::Uniform,
            calibration: CalibrationFunction::Identity,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn spec(&self) -> String {
        let density = match self.density {
            ConfidenceDensity::Uniform => "uniform".to_string(),
            ConfidenceDensity::Beta { a, b } => format!("beta({a},{b})"),
        };
        let calibration = match self.calibration {
            CalibrationFunction::Identity => "identity".to_string(),
            CalibrationFunction::Power { gamma } => format!("power({gamma})"),
            CalibrationFunction::AffineClamped { slope, intercept } => {
                format!("affine({slope},{intercept})")
            }
        };
        format!("p={density} c={calibration} seed={}", self.seed)
    }
}

/// Draw `n` i.i.d. pairs `z ~ p`, `correct ~ Bernoulli(c(z))`.
pub fn sample_batch(
    model: &SyntheticCalibrationModel,
    n: usize,
    seed: u64,
) -> Result<PredictionBatch> {
    if n == 0 {
        return Err(Error::invalid("sample_batch needs N >= 1"));
    }
    model.density.validate()?;
    let mut rng = SplitMix64::new(seed);
    let beta = match model.density {
        ConfidenceDensity::Beta { a, b } => {
            Some(Beta::new(a, b).map_err(|e| Error::config(format!("beta density: {e}")))?)
        }
        ConfidenceDensity::Uniform => None,
    };
    let mut confidence = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for _ in 0..n {
        let z = match &beta {
            Some(d) => d.sample(&mut rng),
            None => rng.uniform(),
        };
        correct.push(rng.uniform() < model.calibration.eval(z));
        confidence.push(z);
    }
    PredictionBatch::new(confidence, correct)
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let (lm, flm, left) = simpson(f, a, fa, m, fm);
    let (rm, frm, right) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Numerical(format!(
            "adaptive Simpson did not converge on [{a}, {b}] (error estimate {delta:e})"
        )));
    }
    // The floor keeps endpoint singularities in the derivative (e.g. sqrt)
    // from demanding accuracy below rounding error.
    let half = (tol / 2.0).max(TOL_FLOOR);
    Ok(
        simpson_rec(f, a, fa, m, fm, lm, flm, left, half, depth - 1)?
            + simpson_rec(f, m, fm, b, fb, rm, frm, right, half, depth - 1)?,
    )
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(&f, a, fa, b, fb);
    let v = simpson_rec(&f, a, fa, b, fb, m, fm, whole, tol, MAX_DEPTH)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(
            "quadrature produced a non-finite value".into(),
        ))
    }
}

/// Population ESD of the model after mapping every confidence through `map`.
///
/// The map must be increasing, so thresholds `a` in the original confidence
/// coordinate correspond one-to-one to thresholds on the mapped one.
fn population_esd<M: Fn(f64) -> f64>(model: &SyntheticCalibrationModel, map: M) -> Result<f64> {
    model.density.validate()?;
    model.calibration.validate()?;
    let p = |z: f64| model.density.pdf(z);
    let integrand = |z: f64| (model.calibration.eval(z) - map(z)) * p(z);
    let gap = |a: f64| adaptive_simpson(integrand, 0.0, a, INNER_TOL);
    let err = std::cell::Cell::new(None);
    let outer = |a: f64| match gap(a) {
        Ok(d) => d * d * p(a),
        Err(e) => {
            err.set(Some(e.to_string()));
            f64::NAN
        }
    };
    let value = adaptive_simpson(outer, 0.0, 1.0, QUADRATURE_TOL);
    if let Some(msg) = err.take() {
        return Err(Error::Numerical(msg));
    }
    value
}

/// Population ESD of the model, by nested adaptive quadrature.
pub fn true_esd(model: &SyntheticCalibrationModel) -> Result<f64> {
    population_esd(model, |z| z)
}

/// `sigma(logit(z) / t)`, the temperature map used by the gradient study.
pub fn temper(z: f64, t: f64) -> f64 {
    if z <= 0.0 || z >= 1.0 {
        return z;
    }
    let logit = (z / (1.0 - z)).ln();
    1.0 / (1.0 + (-logit / t).exp())
}

/// `d temper(z, t) / dt` at `t = 1`, i.e. `-z (1 - z) logit(z)`.
fn temper_slope_at_one(z: f64) -> f64 {
    if z <= 0.0 || z >= 1.0 {
        return 0.0;
    }
    -z * (1.0 - z) * (z / (1.0 - z)).ln()
}

/// Population ESD when confidences are tempered by `t`, with correctness
/// still drawn from `c` at the untempered confidence.
pub fn tempered_true_esd(model: &SyntheticCalibrationModel, t: f64) -> Result<f64> {
    population_esd(model, |z| temper(z, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Naive,
    Unbiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStudyResult {
    pub model_spec: SyntheticCalibrationModel,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub estimator: Estimator,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
    pub truth: f64,
    /// `(mean - truth) / se`.
    pub z_score: f64,
    /// Unbiased: `|z_score| <= 4`. Naive: `z_score > 4`, the upward gap.
    pub pass: bool,
}

impl EstimatorStudyResult {
    pub fn variance(&self) -> f64 {
        self.sd * self.sd
    }

    pub fn gap(&self) -> f64 {
        self.mean - self.truth
    }
}

/// Mean, sample standard deviation and standard error, summed in order.
fn moments(values: &[f64]) -> (f64, f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let sd = var.sqrt();
    (mean, sd, sd / r.sqrt())
}

fn summarize(
    model: &SyntheticCalibrationModel,
    n: usize,
    estimator: Estimator,
    values: &[f64],
    truth: f64,
) -> EstimatorStudyResult {
    let (mean, sd, se) = moments(values);
    let z_score = if se > 0.0 {
        (mean - truth) / se
    } else if mean == truth {
        0.0
    } else {
        (mean - truth).signum() * f64::INFINITY
    };
    let pass = match estimator {
        Estimator::Unbiased => z_score.abs() <= Z_BAND,
        Estimator::Naive => z_score > Z_BAND,
    };
    EstimatorStudyResult {
        model_spec: *model,
        n,
        r: values.len(),
        estimator,
        mean,
        sd,
        se,
        truth,
        z_score,
        pass,
    }
}

fn check_study(n: usize, min_n: usize, r: usize, min_r: usize) -> Result<()> {
    if n < min_n {
        return Err(Error::invalid(format!("study needs N >= {min_n}, got {n}")));
    }
    if r < min_r {
        return Err(Error::invalid(format!("study needs R >= {min_r}, got {r}")));
    }
    Ok(())
}

/// Both estimators on `r` independent batches of size `n`, replication `k`
/// seeded by `derive_seed(seed, k)`.
fn replicate(
    model: &SyntheticCalibrationModel,
    n: usize,
    r: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    (0..r as u64)
        .into_par_iter()
        .map(|k| {
            let batch = sample_batch(model, n, derive_seed(seed, k))?;
            Ok((esd_naive(&batch)?, esd_unbiased(&batch)?.value))
        })
        .collect()
}

/// Mean of each estimator over `r` resampled batches, against [`true_esd`].
///
/// Returns `[naive, unbiased]`.
pub fn unbiasedness_study(
    model: &SyntheticCalibrationModel,
    n: usize,
    r: usize,
) -> Result<[EstimatorStudyResult; 2]> {
    check_study(n, 3, r, 100)?;
    let truth = true_esd(model)?;
    let values = replicate(model, n, r, model.seed)?;
    let naive: Vec<f64> = values.iter().map(|v| v.0).collect();
    let unbiased: Vec<f64> = values.iter().map(|v| v.1).collect();
    Ok([
        summarize(model, n, Estimator::Naive, &naive, truth),
        summarize(model, n, Estimator::Unbiased, &unbiased, truth),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub results: Vec<EstimatorStudyResult>,
    /// `Var(N_{k+1}) / Var(N_k)` for consecutive sample sizes.
    pub variance_ratios: Vec<f64>,
    pub strictly_decreasing: bool,
    /// Every consecutive step that grows N at least tenfold cuts the variance
    /// below a fifth; `None` when there is no such step.
    pub tenfold_shrink: Option<bool>,
    /// No assertion is made for a single sample size.
    pub pass: Option<bool>,
}

/// Variance of the unbiased estimator at each sample size in `ns`.
///
/// Each size gets its own stream of replication seeds.
pub fn consistency_study(
    model: &SyntheticCalibrationModel,
    ns: &[usize],
    r: usize,
) -> Result<ConsistencyReport> {
    if ns.is_empty() {
        return Err(Error::invalid("consistency study needs at least one N"));
    }
    if ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "consistency study N list must be strictly increasing",
        ));
    }
    check_study(ns[0], 3, r, 2)?;
    let truth = true_esd(model)?;
    let mut results = Vec::with_capacity(ns.len());
    for (idx, &n) in ns.iter().enumerate() {
        let values = replicate(model, n, r, derive_seed(model.seed, 1_000_000 + idx as u64))?;
        let unbiased: Vec<f64> = values.iter().map(|v| v.1).collect();
        results.push(summarize(model, n, Estimator::Unbiased, &unbiased, truth));
    }
    let variance_ratios: Vec<f64> = results
        .windows(2)
        .map(|w| w[1].variance() / w[0].variance())
        .collect();
    let strictly_decreasing = variance_ratios.iter().all(|&q| q < 1.0);
    let tenfold: Vec<bool> = results
        .windows(2)
        .zip(&variance_ratios)
        .filter(|(w, _)| w[1].n >= 10 * w[0].n)
        .map(|(_, &q)| q < 0.2)
        .collect();
    let tenfold_shrink = (!tenfold.is_empty()).then(|| tenfold.iter().all(|&ok| ok));
    let pass = (ns.len() > 1).then(|| strictly_decreasing && tenfold_shrink.unwrap_or(true));
    Ok(ConsistencyReport {
        results,
        variance_ratios,
        strictly_decreasing,
        tenfold_shrink,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientStudyReport {
    pub model_spec: SyntheticCalibrationModel,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "R")]
    pub r: usize,
    /// Finite-difference half step in `t`.
    pub step: f64,
    /// Mean and SE of the analytic `dESD/dt` at `t = 1`.
    pub analytic_mean: f64,
    pub analytic_se: f64,
    /// `(mean ESD(1 + h) - mean ESD(1 - h)) / 2h` from independent resamples.
    pub finite_difference: f64,
    pub finite_difference_se: f64,
    /// Difference over the combined standard error.
    pub z_score: f64,
    /// Central difference of the quadrature population ESD in `t`.
    pub population_derivative: f64,
    /// Analytic mean against the population derivative, in analytic SEs.
    pub population_z_score: f64,
    pub pass: bool,
}

/// Default finite-difference half step for [`gradient_expectation_study`].
pub const GRADIENT_STUDY_STEP: f64 = 0.05;
const POPULATION_STEP: f64 = 1e-3;

/// Compare the mean stop-gradient derivative of the unbiased estimator with
/// the derivative of its mean, under `z(t) = sigma(logit(z) / t)` at `t = 1`.
///
/// The analytic side uses replication seeds `0..R`; the two finite-difference
/// sides use the disjoint streams `R..2R` and `2R..3R`. The tempered map is
/// increasing, so the comparison indicators never flip with `t`.
pub fn gradient_expectation_study(
    model: &SyntheticCalibrationModel,
    n: usize,
    r: usize,
    step: f64,
) -> Result<GradientStudyReport> {
    check_study(n, 3, r, 2)?;
    if !(step > 0.0 && step < 0.5) {
        return Err(Error::invalid(format!(
            "finite-difference step must be in (0, 0.5), got {step}"
        )));
    }
    let seed = model.seed;
    let analytic: Vec<f64> = (0..r as u64)
        .into_par_iter()
        .map(|k| {
            let batch = sample_batch(model, n, derive_seed(seed, k))?;
            let g = esd_unbiased(&batch)?;
            Ok(g.grad_confidence
                .iter()
                .zip(batch.confidence())
                .map(|(gk, &z)| gk * temper_slope_at_one(z))
                .sum::<f64>())
        })
        .collect::<Result<_>>()?;
    let tempered = |t: f64, offset: u64| -> Result<Vec<f64>> {
        (0..r as u64)
            .into_par_iter()
            .map(|k| {
                let batch = sample_batch(model, n, derive_seed(seed, offset + k))?;
                let z: Vec<f64> = batch.confidence().iter().map(|&z| temper(z, t)).collect();
                Ok(esd_unbiased(&batch.with_confidence(z)?)?.value)
            })
            .collect()
    };
    let plus = tempered(1.0 + step, r as u64)?;
    let minus = tempered(1.0 - step, 2 * r as u64)?;
    let (analytic_mean, _, analytic_se) = moments(&analytic);
    let (plus_mean, _, plus_se) = moments(&plus);
    let (minus_mean, _, minus_se) = moments(&minus);
    let finite_difference = (plus_mean - minus_mean) / (2.0 * step);
    let finite_difference_se = (plus_se.powi(2) + minus_se.powi(2)).sqrt() / (2.0 * step);
    let combined = (analytic_se.powi(2) + finite_difference_se.powi(2)).sqrt();
    let z_score = ratio_or_zero(analytic_mean - finite_difference, combined);
    let population_derivative = (tempered_true_esd(model, 1.0 + POPULATION_STEP)?
        - tempered_true_esd(model, 1.0 - POPULATION_STEP)?)
        / (2.0 * POPULATION_STEP);
    let population_z_score = ratio_or_zero(analytic_mean - population_derivative, analytic_se);
    Ok(GradientStudyReport {
        model_spec: *model,
        n,
        r,
        step,
        analytic_mean,
        analytic_se,
        finite_difference,
        finite_difference_se,
        z_score,
        population_derivative,
        population_z_score,
        pass: z_score.abs() <= Z_BAND && population_z_score.abs() <= Z_BAND,
    })
}

fn ratio_or_zero(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff.abs() < 1e-15 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}
