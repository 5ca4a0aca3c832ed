//! Fully connected classifier head used by the softmax-containing modes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{DdclError, Result};

/// Weight initializers for the classifier head. Biases always start at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum HeadInit {
    /// N(0, 0.001^2).
    #[default]
    #[serde(rename = "normal_001")]
    Normal001,
    /// U[0, 1e-4].
    #[serde(rename = "uniform_0_1e-4")]
    Uniform0To1e4,
    /// N(0, 2 / fan_in).
    #[serde(rename = "kaiming_normal")]
    KaimingNormal,
    /// N(0, 2 / (fan_in + fan_out)).
    #[serde(rename = "xavier_normal")]
    XavierNormal,
    /// U[-1/sqrt(fan_in), 1/sqrt(fan_in)], the usual framework default for
    /// a linear layer.
    #[serde(rename = "system_random")]
    SystemRandom,
}

impl HeadInit {
    pub const ALL: [HeadInit; 5] = [
        Self::Normal001,
        Self::Uniform0To1e4,
        Self::KaimingNormal,
        Self::XavierNormal,
        Self::SystemRandom,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `n × N`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub init: HeadInit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Gradient with respect to the head's input features.
    pub features: Array2<f64>,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        num_classes: usize,
        init: HeadInit,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(DdclError::Dimension("classifier head with zero size".into()));
        }
        let fan_in = dim as f64;
        let fan_out = num_classes as f64;
        let weights: Vec<f64> = match init {
            HeadInit::Normal001 => sample_normal(0.001, dim * num_classes, rng),
            HeadInit::Uniform0To1e4 => sample_uniform(0.0, 1e-4, dim * num_classes, rng),
            HeadInit::KaimingNormal => sample_normal((2.0 / fan_in).sqrt(), dim * num_classes, rng),
            HeadInit::XavierNormal => {
                sample_normal((2.0 / (fan_in + fan_out)).sqrt(), dim * num_classes, rng)
            }
            HeadInit::SystemRandom => {
                let bound = 1.0 / fan_in.sqrt();
                sample_uniform(-bound, bound, dim * num_classes, rng)
            }
        };
        let weight = Array2::from_shape_vec((dim, num_classes), weights)
            .map_err(|e| DdclError::Dimension(e.to_string()))?;
        Ok(Self {
            weight,
            bias: Array1::zeros(num_classes),
            init,
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.dim() {
            return Err(DdclError::Dimension(format!(
                "head expects {} inputs, got {}",
                self.dim(),
                features.ncols()
            )));
        }
        Ok(features.dot(&self.weight) + &self.bias)
    }

    pub fn backward(&self, features: &Array2<f64>, grad_logits: &Array2<f64>) -> Result<HeadGrad> {
        if grad_logits.dim() != (features.nrows(), self.num_classes()) {
            return Err(DdclError::Dimension("logit gradient shape".into()));
        }
        Ok(HeadGrad {
            weight: features.t().dot(grad_logits),
            bias: grad_logits.sum_axis(Axis(0)),
            features: grad_logits.dot(&self.weight.t()),
        })
    }
}

fn sample_normal<R: Rng + ?Sized>(std: f64, len: usize, rng: &mut R) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

fn sample_uniform<R: Rng + ?Sized>(lo: f64, hi: f64, len: usize, rng: &mut R) -> Vec<f64> {
    let dist = Uniform::new_inclusive(lo, hi).expect("ordered bounds");
    (0..len).map(|_| dist.sample(rng)).collect()
}
