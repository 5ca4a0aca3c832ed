//! Weighted combinations of the loss terms, one per experimental arm.

use serde::{Deserialize, Serialize};

use super::euclidean::{euclidean_center_grad, euclidean_center_loss};
use super::head::{ClassifierHead, HeadGrad};
use super::isolation::{center_isolation_grad_over, IsolationStats, PairSet};
use super::pearson::{mean_correlation, pearson_center_grad, pearson_center_loss};
use super::softmax::softmax_cross_entropy;
use super::types::{CenterBank, FeatureBatch, GradientSet, LossWeights};
use crate::error::{DdclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    /// Softmax only.
    #[serde(rename = "S")]
    S,
    /// Softmax + alpha * L_E.
    #[serde(rename = "SE")]
    SE,
    /// Softmax + alpha * L_E + beta * L_P.
    #[serde(rename = "SEP")]
    SEP,
    /// L_E alone at unit weight.
    #[serde(rename = "E_only")]
    EOnly,
    /// alpha * L_E + beta * L_P - mu * L_CI, no classifier head.
    #[serde(rename = "DDCL")]
    Ddcl,
    /// DDCL with beta = 0.
    #[serde(rename = "DDCL_no_P")]
    DdclNoP,
    /// Softmax + DDCL.
    #[serde(rename = "S_plus_DDCL")]
    SPlusDdcl,
}

/// Term weights a mode actually applies.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Active {
    softmax: bool,
    alpha: f64,
    beta: f64,
    mu: f64,
}

impl LossMode {
    pub const ALL: [LossMode; 7] = [
        Self::S,
        Self::SE,
        Self::SEP,
        Self::EOnly,
        Self::Ddcl,
        Self::DdclNoP,
        Self::SPlusDdcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::S => "S",
            Self::SE => "SE",
            Self::SEP => "SEP",
            Self::EOnly => "E_only",
            Self::Ddcl => "DDCL",
            Self::DdclNoP => "DDCL_no_P",
            Self::SPlusDdcl => "S_plus_DDCL",
        }
    }

    pub fn uses_softmax(self) -> bool {
        matches!(self, Self::S | Self::SE | Self::SEP | Self::SPlusDdcl)
    }

    pub fn uses_euclidean(self) -> bool {
        !matches!(self, Self::S)
    }

    pub fn uses_pearson(self) -> bool {
        matches!(self, Self::SEP | Self::Ddcl | Self::SPlusDdcl)
    }

    pub fn uses_isolation(self) -> bool {
        matches!(self, Self::Ddcl | Self::DdclNoP | Self::SPlusDdcl)
    }

    /// True when some term sends an ordinary gradient to the centers.
    pub fn moves_centers_by_gradient(self) -> bool {
        self.uses_pearson() || self.uses_isolation()
    }

    fn active(self, w: &LossWeights) -> Active {
        let alpha = match self {
            Self::S => 0.0,
            Self::EOnly => 1.0,
            _ => w.alpha,
        };
        Active {
            softmax: self.uses_softmax(),
            alpha,
            beta: if self.uses_pearson() { w.beta } else { 0.0 },
            mu: if self.uses_isolation() { w.mu } else { 0.0 },
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossMode {
    type Err = DdclError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DdclError::config("mode", format!("unknown mode {s:?}")))
    }
}

/// Each term's signed contribution to the total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub softmax: f64,
    /// `alpha * L_E`.
    pub euclidean: f64,
    /// `beta * L_P`.
    pub pearson: f64,
    /// `-mu * L_CI`.
    pub isolation: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.softmax + self.euclidean + self.pearson + self.isolation
    }
}

/// `alpha * L_E + beta * L_P - mu * L_CI` over all center pairs.
pub fn ddcl_loss(
    batch: &FeatureBatch,
    bank: &CenterBank,
    weights: &LossWeights,
) -> Result<(f64, LossBreakdown)> {
    weights.validate()?;
    let breakdown = LossBreakdown {
        softmax: 0.0,
        euclidean: weights.alpha * euclidean_center_loss(batch, bank)?,
        pearson: weights.beta * pearson_center_loss(batch, bank, weights.gamma)?,
        isolation: -weights.mu
            * super::isolation::center_isolation_loss(bank, weights.d_e, weights.nu)?,
    };
    Ok((breakdown.total(), breakdown))
}

#[derive(Debug, Clone)]
pub struct CompositeOutput {
    pub total: f64,
    pub breakdown: LossBreakdown,
    /// Feature gradient of the whole objective; center gradient of the
    /// optimizer-routed terms; moving-average step of the Euclidean term.
    pub grads: GradientSet,
    pub head_grad: Option<HeadGrad>,
    /// Batch-mean correlation between features and their centers.
    pub mean_corr: f64,
    pub isolation: Option<IsolationStats>,
}

/// Evaluate `mode` on one batch.
///
/// `pairs` restricts the isolation term's center pairs; `None` uses all of
/// them. `head` is required exactly when the mode contains softmax.
pub fn composite_loss(
    mode: LossMode,
    batch: &FeatureBatch,
    bank: &CenterBank,
    weights: &LossWeights,
    head: Option<&ClassifierHead>,
    pairs: Option<&PairSet>,
) -> Result<CompositeOutput> {
    weights.validate()?;
    bank.check_batch(batch)?;
    let act = mode.active(weights);
    let mut breakdown = LossBreakdown::default();
    let mut grads = GradientSet::for_batch(batch, bank);
    let mut head_grad = None;

    if act.softmax {
        let head = head.ok_or_else(|| {
            DdclError::config("head", format!("mode {mode} needs a classifier head"))
        })?;
        if head.num_classes() != bank.num_classes() {
            return Err(DdclError::Dimension(format!(
                "head has {} classes, bank has {}",
                head.num_classes(),
                bank.num_classes()
            )));
        }
        let logits = head.logits(batch.features())?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, batch.labels())?;
        let hg = head.backward(batch.features(), &grad_logits)?;
        breakdown.softmax = loss;
        grads.grad_features += &hg.features;
        head_grad = Some(hg);
    }

    if mode.uses_euclidean() {
        breakdown.euclidean = act.alpha * euclidean_center_loss(batch, bank)?;
        let g = euclidean_center_grad(batch, bank, weights.xi)?;
        grads.grad_features.scaled_add(act.alpha, &g.grad_features);
        // the moving-average step is independent of alpha
        grads.center_delta.assign(&g.center_delta);
    }

    if mode.uses_pearson() {
        breakdown.pearson = act.beta * pearson_center_loss(batch, bank, weights.gamma)?;
        if act.beta != 0.0 {
            let g = pearson_center_grad(batch, bank, weights.gamma)?;
            grads.grad_features.scaled_add(act.beta, &g.grad_features);
            grads.grad_centers.scaled_add(act.beta, &g.grad_centers);
        }
    }

    let mut isolation = None;
    if mode.uses_isolation() {
        let all;
        let pairs = match pairs {
            Some(p) => p,
            None => {
                all = PairSet::all(bank.num_classes());
                &all
            }
        };
        let (g, stats) = center_isolation_grad_over(bank, pairs, weights.d_e, weights.nu)?;
        breakdown.isolation = -act.mu * stats.loss;
        grads.grad_centers.scaled_add(-act.mu, &g);
        isolation = Some(stats);
    }

    if !grads.is_finite() {
        return Err(DdclError::Numeric(format!(
            "non-finite gradient in mode {mode}"
        )));
    }

    Ok(CompositeOutput {
        total: breakdown.total(),
        breakdown,
        grads,
        head_grad,
        mean_corr: mean_correlation(batch, bank)?,
        isolation,
    })
}
