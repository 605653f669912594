use crate::data::{argmax, softmax_into, PredictionBatch};
use crate::error::{Error, Result};
use crate::objective::CalibrationObjective;

/// Row-wise softmax of a row-major logit matrix with `classes` columns.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits
        .chunks_exact(classes)
        .zip(out.chunks_exact_mut(classes))
    {
        softmax_into(row, o);
    }
    out
}

fn check_labels(rows: usize, labels: &[usize], classes: usize) -> Result<()> {
    if rows != labels.len() {
        return Err(Error::invalid(format!(
            "{rows} rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {y} >= {classes} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood and its gradient `(softmax - onehot) / B`.
pub fn nll_loss_and_grad(
    logits: &[f64],
    labels: &[usize],
    classes: usize,
) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || !logits.len().is_multiple_of(classes) {
        return Err(Error::invalid("logit buffer is not a whole number of rows"));
    }
    let rows = logits.len() / classes;
    check_labels(rows, labels, classes)?;
    let b = rows as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((row, g), &y) in logits
        .chunks_exact(classes)
        .zip(grad.chunks_exact_mut(classes))
        .zip(labels)
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (gk, &l) in g.iter_mut().zip(row) {
            *gk = (l - lse).exp() / b;
        }
        g[y] -= 1.0 / b;
    }
    Ok((loss / b, grad))
}

/// Value of a calibration objective on a minibatch and its gradient with
/// respect to the logits.
///
/// The objective sees each sample's max-class probability `z_i = p_{i,k}`.
/// The argmax choice is held fixed; the gradient reaches the logits through
/// the softmax Jacobian row of that class, `dz_i/dl_m = z_i (I(m = k) - p_m)`.
pub fn calibration_loss_grad_to_logits(
    probs: &[f64],
    labels: &[usize],
    classes: usize,
    objective: &CalibrationObjective,
) -> Result<(f64, Vec<f64>)> {
    if matches!(objective, CalibrationObjective::None) {
        return Err(Error::invalid("objective `none` has no gradient"));
    }
    if classes == 0 || !probs.len().is_multiple_of(classes) {
        return Err(Error::invalid(
            "probability buffer is not a whole number of rows",
        ));
    }
    let rows = probs.len() / classes;
    check_labels(rows, labels, classes)?;
    let mut winners = Vec::with_capacity(rows);
    let mut confidence = Vec::with_capacity(rows);
    let mut correct = Vec::with_capacity(rows);
    for (row, &y) in probs.chunks_exact(classes).zip(labels) {
        let (k, z) = argmax(row);
        winners.push(k);
        confidence.push(z.clamp(0.0, 1.0));
        correct.push(k == y);
    }
    let batch = PredictionBatch::new(confidence, correct)?;
    let out = objective.evaluate(&batch)?;
    let mut grad = vec![0.0; probs.len()];
    for (i, (row, g)) in probs
        .chunks_exact(classes)
        .zip(grad.chunks_exact_mut(classes))
        .enumerate()
    {
        let k = winners[i];
        let z = row[k];
        let dz = out.grad_confidence[i];
        for (m, (gm, &pm)) in g.iter_mut().zip(row).enumerate() {
            let delta = if m == k { 1.0 } else { 0.0 };
            *gm = dz * z * (delta - pm);
        }
    }
    Ok((out.value, grad))
}
