use ndarray::{Array2, Axis};

use super::TrainError;

/// Mean softmax cross-entropy over the batch, with its gradient w.r.t. the
/// logits: `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>), TrainError> {
    let (batch, classes) = logits.dim();
    if batch == 0 || batch != labels.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{batch} logit rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::LabelOutOfRange { label: bad, classes });
    }
    let mut grad = logits.to_owned();
    let mut total = 0.0;
    for (i, (mut row, &label)) in grad.axis_iter_mut(Axis(0)).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum: f64 = row.sum();
        total += sum.ln() - (logits[[i, label]] - max);
        row.mapv_inplace(|e| e / sum);
        row[label] -= 1.0;
    }
    grad.mapv_inplace(|g| g / batch as f64);
    Ok((total / batch as f64, grad))
}
