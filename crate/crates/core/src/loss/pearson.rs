//! Pearson correlation between an embedding and its center, and the
//! Pearson center loss `[1 - mean_i C(x_i, c_{y_i})]^gamma`.

use ndarray::{Array1, ArrayView1};

use super::types::{CenterBank, FeatureBatch, GradientSet};
use super::{indexed_map, indexed_sum};
use crate::error::{DdclError, Result};

/// Centered norms below this value are bumped by the same amount so that
/// constant vectors yield a correlation near zero instead of a division by
/// zero.
pub const VARIANCE_GUARD: f64 = 1e-12;

struct Centered {
    v: Array1<f64>,
    norm: f64,
}

fn center(v: ArrayView1<'_, f64>) -> Centered {
    let mean = v.sum() / v.len() as f64;
    let v = v.mapv(|a| a - mean);
    let mut norm = v.dot(&v).sqrt();
    if norm < VARIANCE_GUARD {
        norm += VARIANCE_GUARD;
    }
    Centered { v, norm }
}

fn check_pair(x: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>) -> Result<()> {
    if x.len() != c.len() {
        return Err(DdclError::Dimension(format!(
            "correlation of vectors with lengths {} and {}",
            x.len(),
            c.len()
        )));
    }
    if x.len() < 2 {
        return Err(DdclError::Dimension(
            "correlation needs at least 2 components".into(),
        ));
    }
    if !x.iter().chain(c.iter()).all(|v| v.is_finite()) {
        return Err(DdclError::Numeric("non-finite input to correlation".into()));
    }
    Ok(())
}

/// Pearson correlation coefficient of `x` and `c`, in `[-1, 1]`.
pub fn pearson_corr(x: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>) -> Result<f64> {
    check_pair(x, c)?;
    let xc = center(x);
    let cc = center(c);
    Ok((xc.v.dot(&cc.v) / (xc.norm * cc.norm)).clamp(-1.0, 1.0))
}

/// Correlation together with its partial derivatives.
#[derive(Debug, Clone)]
pub struct CorrelationGrad {
    pub corr: f64,
    pub d_x: Array1<f64>,
    pub d_c: Array1<f64>,
}

/// `dC/dx = c~ / (|x~||c~|) - (x~.c~) x~ / (|x~|^3 |c~|)` and the mirror
/// expression for `dC/dc`, where `~` denotes mean removal.
///
/// Both derivatives are mean-free, so the centering Jacobian drops out.
pub fn pearson_corr_grad(x: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>) -> Result<CorrelationGrad> {
    check_pair(x, c)?;
    Ok(corr_grad_unchecked(x, c))
}

fn corr_grad_unchecked(x: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>) -> CorrelationGrad {
    let xc = center(x);
    let cc = center(c);
    let dot = xc.v.dot(&cc.v);
    let denom = xc.norm * cc.norm;
    let corr = (dot / denom).clamp(-1.0, 1.0);
    let d_x = &cc.v / denom - &xc.v * (dot / (xc.norm.powi(3) * cc.norm));
    let d_c = &xc.v / denom - &cc.v * (dot / (xc.norm * cc.norm.powi(3)));
    CorrelationGrad { corr, d_x, d_c }
}

fn row_corr(batch: &FeatureBatch, bank: &CenterBank, i: usize) -> f64 {
    let xc = center(batch.row(i));
    let cc = center(bank.center(batch.labels()[i]));
    (xc.v.dot(&cc.v) / (xc.norm * cc.norm)).clamp(-1.0, 1.0)
}

/// Batch-mean correlation between features and their centers.
pub fn mean_correlation(batch: &FeatureBatch, bank: &CenterBank) -> Result<f64> {
    bank.check_batch(batch)?;
    let m = batch.len();
    Ok(indexed_sum(m, |i| row_corr(batch, bank, i)) / m as f64)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 1.0) || !gamma.is_finite() {
        return Err(DdclError::config(
            "gamma",
            format!("must be a finite value greater than 1, got {gamma}"),
        ));
    }
    Ok(())
}

/// Mean Pearson distance, clamped at zero against rounding.
fn mean_distance(batch: &FeatureBatch, bank: &CenterBank) -> Result<f64> {
    Ok((1.0 - mean_correlation(batch, bank)?).max(0.0))
}

pub fn pearson_center_loss(batch: &FeatureBatch, bank: &CenterBank, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(mean_distance(batch, bank)?.powf(gamma))
}

/// Gradients of the Pearson center loss. Both features and centers receive
/// ordinary derivatives; `center_delta` stays zero.
pub fn pearson_center_grad(
    batch: &FeatureBatch,
    bank: &CenterBank,
    gamma: f64,
) -> Result<GradientSet> {
    check_gamma(gamma)?;
    let p_bar = mean_distance(batch, bank)?;
    let m = batch.len();
    let scale = -(gamma / m as f64) * p_bar.powf(gamma - 1.0);

    let mut grads = GradientSet::for_batch(batch, bank);
    if scale == 0.0 {
        return Ok(grads);
    }
    let per_row = indexed_map(m, |i| {
        corr_grad_unchecked(batch.row(i), bank.center(batch.labels()[i]))
    });
    for (i, (g, &y)) in per_row.iter().zip(batch.labels()).enumerate() {
        grads.grad_features.row_mut(i).assign(&(&g.d_x * scale));
        grads.grad_centers.row_mut(y).scaled_add(scale, &g.d_c);
    }
    Ok(grads)
}
