use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::embedder::Activation;
use crate::error::{DdclError, Result};
use crate::loss::{CenterParticipation, HeadInit, LossMode, LossWeights};

/// Everything the training loop needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
    pub seed: u64,
    pub center_participation: CenterParticipation,
    pub embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub head_init: HeadInit,
    /// Centers start as `scale * N(0, 1)`.
    pub center_init_scale: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Ddcl,
            weights: LossWeights::default(),
            batch_size: 32,
            base_lr: 1e-3,
            decay_epochs: vec![10, 17],
            decay_factor: 0.1,
            total_epochs: 22,
            seed: 0,
            center_participation: CenterParticipation::Method3,
            embedding_dim: 8,
            hidden_dims: vec![64],
            activation: Activation::Relu,
            head_init: HeadInit::Normal001,
            center_init_scale: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate().map_err(|e| match e {
            DdclError::Config { field, message } => DdclError::Config {
                field: format!("weights.{field}"),
                message,
            },
            other => other,
        })?;
        if self.batch_size < 2 {
            return Err(DdclError::config(
                "batch_size",
                format!("must be at least 2, got {}", self.batch_size),
            ));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(DdclError::config("base_lr", "must be positive and finite"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(DdclError::config("decay_factor", "must lie in (0, 1]"));
        }
        if self.total_epochs == 0 {
            return Err(DdclError::config("total_epochs", "must be at least 1"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DdclError::config(
                "decay_epochs",
                "must be strictly increasing",
            ));
        }
        if let Some(&last) = self.decay_epochs.last() {
            if last >= self.total_epochs {
                return Err(DdclError::config(
                    "decay_epochs",
                    format!("epoch {last} is not below total_epochs {}", self.total_epochs),
                ));
            }
        }
        if self.embedding_dim < 2 {
            return Err(DdclError::config("embedding_dim", "must be at least 2"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(DdclError::config("hidden_dims", "layers must be non-empty"));
        }
        if !(self.center_init_scale >= 0.0) || !self.center_init_scale.is_finite() {
            return Err(DdclError::config("center_init_scale", "must be non-negative"));
        }
        Ok(())
    }
}

/// `base_lr * decay_factor^(number of decay epochs <= epoch)`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.total_epochs {
        return Err(DdclError::config(
            "epoch",
            format!("{epoch} outside 0..{}", config.total_epochs),
        ));
    }
    let decays = config.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(config.base_lr * config.decay_factor.powi(decays as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_schedule() -> TrainConfig {
        TrainConfig {
            base_lr: 1e-4,
            decay_epochs: vec![10, 17],
            decay_factor: 0.1,
            total_epochs: 22,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn step_decay() {
        let c = full_schedule();
        assert_eq!(lr_at_epoch(&c, 0).unwrap(), 1e-4);
        assert_eq!(lr_at_epoch(&c, 9).unwrap(), 1e-4);
        assert!((lr_at_epoch(&c, 10).unwrap() - 1e-5).abs() < 1e-20);
        assert!((lr_at_epoch(&c, 17).unwrap() - 1e-6).abs() < 1e-20);
        assert!((lr_at_epoch(&c, 21).unwrap() - 1e-6).abs() < 1e-20);
        assert!(lr_at_epoch(&c, 22).is_err());
    }

    #[test]
    fn validation() {
        full_schedule().validate().unwrap();
        let bad = [
            TrainConfig { batch_size: 1, ..full_schedule() },
            TrainConfig { decay_epochs: vec![10, 10], ..full_schedule() },
            TrainConfig { decay_epochs: vec![10, 22], ..full_schedule() },
            TrainConfig {
                weights: LossWeights { gamma: 0.9, ..LossWeights::default() },
                ..full_schedule()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(DdclError::Config { .. })), "{c:?}");
        }
        let err = TrainConfig {
            weights: LossWeights { nu: 0.0, ..LossWeights::default() },
            ..full_schedule()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("weights.nu"));
    }
}
