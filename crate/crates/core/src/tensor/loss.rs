use crate::error::{Error, Result};
use crate::tensor::tensor::Tensor;

fn check(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let batch = logits.rows();
    if batch == 0 || labels.is_empty() {
        return Err(Error::InvalidArgument("cross entropy of an empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for {batch} rows of logits",
            labels.len()
        )));
    }
    let classes = logits.row_len();
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(classes)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-softmax of the labelled class.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check(logits, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = logits.row(i);
            log_sum_exp(row) - row[l]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Cotangent of the mean cross entropy with respect to the logits:
/// `(softmax - onehot) / batch`.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let classes = check(logits, labels)?;
    let scale = 1.0 / labels.len() as f64;
    let mut out = Vec::with_capacity(logits.len());
    for (i, &l) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        for (c, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            out.push(scale * if c == l { p - 1.0 } else { p });
        }
    }
    Tensor::new(vec![labels.len(), classes], out)
}
