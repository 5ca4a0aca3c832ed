use ndarray::Array2;

use crate::error::{DdclError, Result};

/// Mean softmax cross-entropy over rows of `logits` and its gradient
/// `(softmax - onehot) / m`.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (m, n_classes) = logits.dim();
    if m == 0 || labels.len() != m {
        return Err(DdclError::Dimension(format!(
            "{} labels for {m} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(DdclError::LabelOutOfRange {
            label: bad,
            num_classes: n_classes,
        });
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(DdclError::Numeric("non-finite logit".into()));
    }

    let inv_m = 1.0 / m as f64;
    let mut grad = Array2::zeros((m, n_classes));
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        total += log_norm - row[y];
        let mut g = grad.row_mut(i);
        for (k, g) in g.iter_mut().enumerate() {
            let p = (row[k] - log_norm).exp();
            *g = inv_m * (p - if k == y { 1.0 } else { 0.0 });
        }
    }
    Ok((total * inv_m, grad))
}
