use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{DdclError, Result};

fn all_finite(a: &Array2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// A mini-batch of embeddings (`m × n`) with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let (m, n) = features.dim();
        if m == 0 {
            return Err(DdclError::Empty("feature batch has no rows".into()));
        }
        if n < 2 {
            return Err(DdclError::Dimension(format!(
                "embedding dimension must be at least 2, got {n}"
            )));
        }
        if labels.len() != m {
            return Err(DdclError::Dimension(format!(
                "{} labels for {m} feature rows",
                labels.len()
            )));
        }
        if !all_finite(&features) {
            return Err(DdclError::Numeric("non-finite feature entry".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Batch size `m`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Embedding dimension `n`.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<usize>) {
        (self.features, self.labels)
    }

    /// Distinct labels present in the batch, ascending.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut classes = self.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        classes
    }
}

/// The `N` learnable class centers, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    centers: Array2<f64>,
}

impl CenterBank {
    pub fn new(centers: Array2<f64>) -> Result<Self> {
        if centers.nrows() < 2 {
            return Err(DdclError::Dimension(format!(
                "center bank needs at least 2 classes, got {}",
                centers.nrows()
            )));
        }
        if centers.ncols() == 0 {
            return Err(DdclError::Dimension("center bank has zero width".into()));
        }
        if !all_finite(&centers) {
            return Err(DdclError::Numeric("non-finite center entry".into()));
        }
        Ok(Self { centers })
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub(crate) fn centers_mut(&mut self) -> &mut Array2<f64> {
        &mut self.centers
    }

    pub fn num_classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn center(&self, j: usize) -> ArrayView1<'_, f64> {
        self.centers.row(j)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.centers
    }

    pub fn pair_sq_distance(&self, i: usize, j: usize) -> f64 {
        self.centers
            .row(i)
            .iter()
            .zip(self.centers.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.centers)
    }

    pub(crate) fn check_batch(&self, batch: &FeatureBatch) -> Result<()> {
        if batch.dim() != self.dim() {
            return Err(DdclError::Dimension(format!(
                "feature dimension {} does not match center dimension {}",
                batch.dim(),
                self.dim()
            )));
        }
        let n_classes = self.num_classes();
        if let Some(&bad) = batch.labels().iter().find(|&&y| y >= n_classes) {
            return Err(DdclError::LabelOutOfRange {
                label: bad,
                num_classes: n_classes,
            });
        }
        if !self.is_finite() {
            return Err(DdclError::Numeric("non-finite center entry".into()));
        }
        Ok(())
    }
}

/// Scalar hyperparameters of the loss family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the Euclidean center loss.
    pub alpha: f64,
    /// Weight of the Pearson center loss.
    pub beta: f64,
    /// Pearson exponent, must exceed 1.
    pub gamma: f64,
    /// Weight of the center isolation loss.
    pub mu: f64,
    /// Center learning rate of the moving-average update.
    pub lambda_c: f64,
    /// Denominator guard of the moving-average update.
    pub xi: f64,
    /// Small sample inhibition factor.
    pub nu: f64,
    /// Threshold on squared center-pair distance.
    pub d_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.003,
            beta: 5.0,
            gamma: 10.0,
            mu: 0.005,
            lambda_c: 0.5,
            xi: 1e-6,
            nu: 1.0,
            d_e: 0.0,
        }
    }
}

impl LossWeights {
    /// Defaults with `nu = 0.5 * num_classes`.
    pub fn for_classes(num_classes: usize) -> Self {
        Self {
            nu: 0.5 * num_classes as f64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("mu", self.mu),
            ("lambda_c", self.lambda_c),
            ("xi", self.xi),
            ("nu", self.nu),
            ("d_e", self.d_e),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(DdclError::config(name, "must be finite"));
            }
        }
        if self.gamma <= 1.0 {
            return Err(DdclError::config(
                "gamma",
                format!("must be greater than 1, got {}", self.gamma),
            ));
        }
        if self.nu <= 0.0 {
            return Err(DdclError::config(
                "nu",
                format!("must be positive, got {}", self.nu),
            ));
        }
        if self.xi <= 0.0 {
            return Err(DdclError::config("xi", "must be positive"));
        }
        for (name, value) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("mu", self.mu),
            ("lambda_c", self.lambda_c),
            ("d_e", self.d_e),
        ] {
            if value < 0.0 {
                return Err(DdclError::config(name, "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Per-batch gradients.
///
/// `grad_features` and `grad_centers` are ordinary derivatives consumed by
/// the optimizer. `center_delta` holds the moving-average step of the
/// Euclidean term, applied separately with the center learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grad_features: Array2<f64>,
    pub grad_centers: Array2<f64>,
    pub center_delta: Array2<f64>,
}

impl GradientSet {
    pub fn zeros(batch_rows: usize, dim: usize, num_classes: usize) -> Self {
        Self {
            grad_features: Array2::zeros((batch_rows, dim)),
            grad_centers: Array2::zeros((num_classes, dim)),
            center_delta: Array2::zeros((num_classes, dim)),
        }
    }

    pub fn for_batch(batch: &FeatureBatch, bank: &CenterBank) -> Self {
        Self::zeros(batch.len(), batch.dim(), bank.num_classes())
    }

    /// `self += weight * other` on every component.
    pub fn add_scaled(&mut self, weight: f64, other: &GradientSet) -> Result<()> {
        if self.grad_features.dim() != other.grad_features.dim()
            || self.grad_centers.dim() != other.grad_centers.dim()
            || self.center_delta.dim() != other.center_delta.dim()
        {
            return Err(DdclError::Dimension("gradient set shapes differ".into()));
        }
        self.grad_features.scaled_add(weight, &other.grad_features);
        self.grad_centers.scaled_add(weight, &other.grad_centers);
        self.center_delta.scaled_add(weight, &other.center_delta);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.grad_features)
            && all_finite(&self.grad_centers)
            && all_finite(&self.center_delta)
    }
}
