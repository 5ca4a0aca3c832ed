//! Euclidean center loss and the moving-average center update.

use ndarray::{Array1, Array2, Zip};

use super::types::{CenterBank, FeatureBatch, GradientSet};
use super::{indexed_map, indexed_sum};
use crate::error::{DdclError, Result};

fn sq_dist_to_center(batch: &FeatureBatch, bank: &CenterBank, i: usize) -> f64 {
    let c = bank.center(batch.labels()[i]);
    batch
        .row(i)
        .iter()
        .zip(c.iter())
        .map(|(x, c)| (x - c) * (x - c))
        .sum()
}

/// `(1 / 2m) * sum_i ||x_i - c_{y_i}||^2`.
pub fn euclidean_center_loss(batch: &FeatureBatch, bank: &CenterBank) -> Result<f64> {
    bank.check_batch(batch)?;
    let m = batch.len();
    let total = indexed_sum(m, |i| sq_dist_to_center(batch, bank, i));
    Ok(total / (2.0 * m as f64))
}

/// Feature gradient `(x_i - c_{y_i}) / m` and the moving-average step
/// `delta_j = sum_{y_i = j} (c_j - x_i) / (xi + count_j)`.
///
/// `grad_centers` is left at zero: centers follow `center_delta` instead.
pub fn euclidean_center_grad(
    batch: &FeatureBatch,
    bank: &CenterBank,
    xi: f64,
) -> Result<GradientSet> {
    bank.check_batch(batch)?;
    if !(xi > 0.0) {
        return Err(DdclError::config("xi", "must be positive"));
    }
    let m = batch.len();
    let inv_m = 1.0 / m as f64;
    let mut grads = GradientSet::for_batch(batch, bank);

    for (i, &y) in batch.labels().iter().enumerate() {
        let c = bank.center(y);
        let mut g = grads.grad_features.row_mut(i);
        Zip::from(&mut g)
            .and(&batch.row(i))
            .and(&c)
            .for_each(|g, &x, &c| *g = inv_m * (x - c));
    }

    let mut counts = vec![0usize; bank.num_classes()];
    for (i, &y) in batch.labels().iter().enumerate() {
        counts[y] += 1;
        let mut d = grads.center_delta.row_mut(y);
        Zip::from(&mut d)
            .and(&bank.center(y))
            .and(&batch.row(i))
            .for_each(|d, &c, &x| *d += c - x);
    }
    for (j, &count) in counts.iter().enumerate() {
        if count > 0 {
            let denom = xi + count as f64;
            grads.center_delta.row_mut(j).mapv_inplace(|v| v / denom);
        }
    }
    Ok(grads)
}

/// The true derivative of the Euclidean center loss with respect to each
/// center, `(1/m) * sum_{y_i = j} (c_j - x_i)`. Only the gradient checker
/// uses this; training moves centers with the moving-average step.
pub fn euclidean_exact_center_grad(batch: &FeatureBatch, bank: &CenterBank) -> Result<Array2<f64>> {
    bank.check_batch(batch)?;
    let inv_m = 1.0 / batch.len() as f64;
    let mut out = Array2::zeros(bank.centers().dim());
    let rows: Vec<Array1<f64>> = indexed_map(batch.len(), |i| {
        let y = batch.labels()[i];
        (&bank.center(y) - &batch.row(i)) * inv_m
    });
    for (row, &y) in rows.iter().zip(batch.labels()) {
        let mut target = out.row_mut(y);
        target += row;
    }
    Ok(out)
}

/// `c_j <- c_j - lambda * delta_j`.
pub fn apply_center_update(
    bank: &CenterBank,
    delta: &GradientSet,
    lambda_c: f64,
) -> Result<CenterBank> {
    if delta.center_delta.dim() != bank.centers().dim() {
        return Err(DdclError::Dimension(format!(
            "center delta shape {:?} does not match bank shape {:?}",
            delta.center_delta.dim(),
            bank.centers().dim()
        )));
    }
    let mut centers = bank.centers().clone();
    centers.scaled_add(-lambda_c, &delta.center_delta);
    CenterBank::new(centers)
}
