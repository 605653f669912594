//! Datasets, probability vectors and prediction batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

/// Tolerance on the unit-sum invariant of a [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labelled classification dataset.
///
/// Serialized as the JSON envelope `{name, C, F, rows}` where each row is
/// `{features, label}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    #[serde(rename = "C")]
    pub num_classes: usize,
    #[serde(rename = "F")]
    pub num_features: usize,
    #[serde(rename = "rows")]
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "dataset needs at least 2 classes, got {num_classes}"
            )));
        }
        let first = examples
            .first()
            .ok_or_else(|| Error::invalid("dataset is empty"))?;
        let num_features = first.features.len();
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != num_features {
                return Err(Error::invalid(format!(
                    "example {i} has {} features, expected {num_features}",
                    ex.features.len()
                )));
            }
            if ex.label >= num_classes {
                return Err(Error::invalid(format!(
                    "example {i} has label {} >= {num_classes} classes",
                    ex.label
                )));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "example {i} has non-finite features"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            num_features,
            examples,
        })
    }

    /// Re-check invariants, e.g. after deserialization.
    pub fn validated(self) -> Result<Self> {
        let declared = self.num_features;
        let ds = Dataset::new(self.name, self.num_classes, self.examples)?;
        if ds.num_features != declared {
            return Err(Error::invalid(format!(
                "declared F={declared} but rows have {} features",
                ds.num_features
            )));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Row-major feature matrix (`len * num_features`).
    pub fn feature_matrix(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.num_features);
        for ex in &self.examples {
            out.extend_from_slice(&ex.features);
        }
        out
    }

    fn subset(&self, name: &str, idx: &[usize]) -> Dataset {
        Dataset {
            name: format!("{}/{name}", self.name),
            num_classes: self.num_classes,
            num_features: self.num_features,
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}

/// A categorical distribution over `C` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if entries.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probability entry outside [0, 1]"));
        }
        let total: f64 = entries.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index and value of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, f64) {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Lowest-index argmax of a non-empty slice.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// Max-subtracted softmax written into `out`. Inputs are assumed finite.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("softmax input is not finite"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(ProbVector(out))
}

/// Predicted-class confidences and correctness flags.
///
/// This is the only input the calibration metrics look at.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    confidence: Vec<f64>,
    correct: Vec<bool>,
}

impl PredictionBatch {
    pub fn new(confidence: Vec<f64>, correct: Vec<bool>) -> Result<Self> {
        if confidence.len() != correct.len() {
            return Err(Error::invalid(format!(
                "{} confidences but {} correctness flags",
                confidence.len(),
                correct.len()
            )));
        }
        if confidence.is_empty() {
            return Err(Error::invalid("prediction batch is empty"));
        }
        if let Some(i) = confidence.iter().position(|z| !(0.0..=1.0).contains(z)) {
            return Err(Error::invalid(format!(
                "confidence[{i}] = {} outside [0, 1]",
                confidence[i]
            )));
        }
        Ok(Self {
            confidence,
            correct,
        })
    }

    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn correct(&self) -> &[bool] {
        &self.correct
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        self.confidence
            .iter()
            .copied()
            .zip(self.correct.iter().copied())
    }

    pub fn accuracy(&self) -> f64 {
        self.correct.iter().filter(|&&c| c).count() as f64 / self.len() as f64
    }

    pub fn mean_confidence(&self) -> f64 {
        self.confidence.iter().sum::<f64>() / self.len() as f64
    }

    /// Same correctness flags, new confidences.
    pub fn with_confidence(&self, confidence: Vec<f64>) -> Result<Self> {
        PredictionBatch::new(confidence, self.correct.clone())
    }

    /// Reorder samples by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            confidence: perm.iter().map(|&i| self.confidence[i]).collect(),
            correct: perm.iter().map(|&i| self.correct[i]).collect(),
        }
    }
}

pub fn to_prediction_batch(probs: &[ProbVector], labels: &[usize]) -> Result<PredictionBatch> {
    if probs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} probability vectors but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut confidence = Vec::with_capacity(probs.len());
    let mut correct = Vec::with_capacity(probs.len());
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        if y >= p.num_classes() {
            return Err(Error::invalid(format!(
                "label {y} at row {i} out of range for {} classes",
                p.num_classes()
            )));
        }
        let (k, z) = p.argmax();
        confidence.push(z);
        correct.push(k == y);
    }
    PredictionBatch::new(confidence, correct)
}

/// Build a batch straight from row-major logits (`labels.len()` rows).
pub fn batch_from_logits(logits: &[f64], labels: &[usize]) -> Result<PredictionBatch> {
    let n = labels.len();
    if n == 0 || !logits.len().is_multiple_of(n) {
        return Err(Error::invalid("logit matrix does not match label count"));
    }
    let c = logits.len() / n;
    let probs = logits.chunks(c).map(softmax).collect::<Result<Vec<_>>>()?;
    to_prediction_batch(&probs, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Fraction of the train portion carved out as the calibration subset.
    pub interleave: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            interleave: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!(
                    "split fraction `{name}` = {v} must be in (0, 1)"
                )));
            }
        }
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions train+val+test sum to {total}, expected 1"
            )));
        }
        if !(self.interleave > 0.0 && self.interleave < 1.0) {
            return Err(Error::config(format!(
                "split fraction `interleave` = {} must be in (0, 1)",
                self.interleave
            )));
        }
        Ok(())
    }
}

/// The four disjoint parts of a dataset used by interleaved training.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    /// Train portion minus the calibration subset (NLL data).
    pub train: Dataset,
    /// Calibration subset carved from the train portion.
    pub cal: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// The undivided train portion (train' followed by cal').
    pub fn full_train(&self) -> Dataset {
        let mut full = self.train.clone();
        full.name = full.name.replace("/train'", "/train");
        full.examples.extend(self.cal.examples.iter().cloned());
        full
    }
}

/// Seeded Fisher-Yates shuffle followed by contiguous slicing.
///
/// Sizes are `round(n * train)`, `round(n * val)` and the remainder for test;
/// the calibration subset takes `round(|train| * interleave)` examples from the
/// end of the train slice.
pub fn split_dataset(d: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = d.len();
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMix64::new(spec.seed).shuffle(&mut idx);

    let n_train = (n as f64 * spec.train).round() as usize;
    let n_val = (n as f64 * spec.val).round() as usize;
    let n_test = n.saturating_sub(n_train + n_val);
    let n_cal = (n_train as f64 * spec.interleave).round() as usize;
    let n_train_prime = n_train.saturating_sub(n_cal);

    for (name, size) in [
        ("train'", n_train_prime),
        ("cal'", n_cal),
        ("val", n_val),
        ("test", n_test),
    ] {
        if size == 0 {
            return Err(Error::config(format!(
                "split `{name}` would be empty ({n} examples)"
            )));
        }
    }

    let (train_idx, rest) = idx.split_at(n_train);
    let (val_idx, test_idx) = rest.split_at(n_val);
    let (train_prime_idx, cal_idx) = train_idx.split_at(n_train_prime);
    Ok(Splits {
        train: d.subset("train'", train_prime_idx),
        cal: d.subset("cal'", cal_idx),
        val: d.subset("val", val_idx),
        test: d.subset("test", test_idx),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    /// Probability that a label is resampled uniformly over all classes.
    pub label_noise: f64,
    /// Feature dimension, 2 to 8.
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 1000,
            separation: 1.5,
            label_noise: 0.2,
            dim: 2,
            seed: 0,
        }
    }
}

/// Gaussian blobs with unit covariance.
///
/// Class `k` is centred at radius `separation` and angle `2 pi k / C` in the
/// first two coordinates; the remaining coordinates are pure noise. Each
/// label is then replaced, with probability `label_noise`, by a uniform draw
/// over all classes. Examples are emitted class by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    use rand_distr::{Distribution, StandardNormal};

    if spec.classes < 2 {
        return Err(Error::config("synthetic `classes` must be >= 2"));
    }
    if spec.per_class == 0 {
        return Err(Error::config("synthetic `per_class` must be >= 1"));
    }
    if !(0.0..0.5).contains(&spec.label_noise) {
        return Err(Error::config(format!(
            "synthetic `label_noise` = {} must be in [0, 0.5)",
            spec.label_noise
        )));
    }
    if !(2..=8).contains(&spec.dim) {
        return Err(Error::config(format!(
            "synthetic `dim` = {} must be in 2..=8",
            spec.dim
        )));
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return Err(Error::config(
            "synthetic `separation` must be finite and >= 0",
        ));
    }

    let mut feat_rng = SplitMix64::new(derive_seed(spec.seed, 0));
    let mut label_rng = SplitMix64::new(derive_seed(spec.seed, 1));
    let mut examples = Vec::with_capacity(spec.classes * spec.per_class);
    for k in 0..spec.classes {
        let angle = std::f64::consts::TAU * k as f64 / spec.classes as f64;
        let centre = [spec.separation * angle.cos(), spec.separation * angle.sin()];
        for _ in 0..spec.per_class {
            let features = (0..spec.dim)
                .map(|d| {
                    let noise: f64 = StandardNormal.sample(&mut feat_rng);
                    centre.get(d).copied().unwrap_or(0.0) + noise
                })
                .collect();
            let label = if label_rng.bernoulli(spec.label_noise) {
                label_rng.below(spec.classes)
            } else {
                k
            };
            examples.push(LabeledExample { features, label });
        }
    }
    Dataset::new(
        format!("blobs-c{}-s{}", spec.classes, spec.seed),
        spec.classes,
        examples,
    )
}
