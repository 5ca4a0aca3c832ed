//! A small fully connected embedder with hand-written backpropagation.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DdclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Tanh => z.tanh(),
            Self::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Self::Identity => 1.0,
        }
    }

    fn init_std(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Self::Relu => (2.0 / fan_in as f64).sqrt(),
            Self::Tanh => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            Self::Identity => (1.0 / fan_in as f64).sqrt(),
        }
    }
}

/// `y = x W^T + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderGrads {
    pub layers: Vec<DenseGrad>,
}

impl EmbedderGrads {
    /// Gradient tensors in the same order as [`Embedder::tensor`].
    pub fn tensor(&self, k: usize) -> &[f64] {
        let layer = &self.layers[k / 2];
        let t = if k.is_multiple_of(2) {
            layer.weight.as_slice()
        } else {
            layer.bias.as_slice()
        };
        t.expect("standard layout")
    }

    pub fn num_tensors(&self) -> usize {
        self.layers.len() * 2
    }
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`; `inputs[0]` is the batch.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer; the last one is the output.
    pre: Vec<Array2<f64>>,
    version: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.pre.pop().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    layers: Vec<Dense>,
    activation: Activation,
    /// Bumped on every parameter mutation to detect stale caches.
    version: u64,
}

impl Embedder {
    /// He/Glorot-style random weights (by activation), zero biases.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        if dims.contains(&0) {
            return Err(DdclError::Dimension(format!("zero-width layer in {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let dist = Normal::new(0.0, activation.init_std(fan_in, fan_out))
                    .expect("positive std");
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(rng));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self::from_layers(layers, activation)
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(DdclError::Dimension("embedder needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(DdclError::Dimension(format!("layer {l}: bias length")));
            }
            if let Some(next) = layers.get(l + 1) {
                if next.input_dim() != layer.output_dim() {
                    return Err(DdclError::Dimension(format!(
                        "layer {l} outputs {} but layer {} expects {}",
                        layer.output_dim(),
                        l + 1,
                        next.input_dim()
                    )));
                }
            }
            let finite = layer.weight.iter().chain(layer.bias.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(DdclError::Numeric(format!("layer {l}: non-finite parameter")));
            }
        }
        // owned arrays must be in standard layout for slice access
        let layers = layers
            .into_iter()
            .map(|d| Dense {
                weight: d.weight.as_standard_layout().into_owned(),
                bias: d.bias,
            })
            .collect();
        Ok(Self {
            layers,
            activation,
            version: 0,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn forward(&self, inputs: &Array2<f64>) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_dim() {
            return Err(DdclError::Dimension(format!(
                "embedder expects {} input columns, got {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weight.t()) + &layer.bias;
            layer_inputs.push(a);
            if l + 1 < self.layers.len() {
                a = z.mapv(|v| self.activation.apply(v));
            } else {
                a = Array2::zeros((0, 0));
            }
            pre.push(z);
        }
        Ok(ForwardCache {
            inputs: layer_inputs,
            pre,
            version: self.version,
        })
    }

    pub fn embed(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(inputs)?.into_output())
    }

    pub fn backward(&self, cache: &ForwardCache, grad_output: &Array2<f64>) -> Result<EmbedderGrads> {
        if cache.version != self.version {
            return Err(DdclError::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        if grad_output.dim() != cache.output().dim() {
            return Err(DdclError::Dimension(format!(
                "output gradient shape {:?} vs output {:?}",
                grad_output.dim(),
                cache.output().dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.clone();
        for l in (0..self.layers.len()).rev() {
            let weight_grad = delta.t().dot(&cache.inputs[l]);
            let bias_grad = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut upstream = delta.dot(&self.layers[l].weight);
                ndarray::Zip::from(&mut upstream)
                    .and(&cache.pre[l - 1])
                    .for_each(|g, &z| *g *= self.activation.derivative(z));
                delta = upstream;
            }
            grads.push(DenseGrad {
                weight: weight_grad,
                bias: bias_grad,
            });
        }
        grads.reverse();
        Ok(EmbedderGrads { layers: grads })
    }

    /// Parameter tensors in the order weight0, bias0, weight1, bias1, ...
    pub fn num_tensors(&self) -> usize {
        self.layers.len() * 2
    }

    pub fn tensor(&self, k: usize) -> &[f64] {
        let layer = &self.layers[k / 2];
        let t = if k.is_multiple_of(2) {
            layer.weight.as_slice()
        } else {
            layer.bias.as_slice()
        };
        t.expect("standard layout")
    }

    pub fn tensor_shape(&self, k: usize) -> Vec<usize> {
        let layer = &self.layers[k / 2];
        if k.is_multiple_of(2) {
            layer.weight.shape().to_vec()
        } else {
            vec![layer.bias.len()]
        }
    }

    pub fn tensor_name(k: usize) -> String {
        format!(
            "embedder.{}.{}",
            k / 2,
            if k.is_multiple_of(2) { "weight" } else { "bias" }
        )
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut [f64] {
        self.version += 1;
        let layer = &mut self.layers[k / 2];
        let t = if k.is_multiple_of(2) {
            layer.weight.as_slice_mut()
        } else {
            layer.bias.as_slice_mut()
        };
        t.expect("standard layout")
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_zero_output() {
        let layers = vec![
            Dense {
                weight: Array2::zeros((5, 3)),
                bias: Array1::zeros(5),
            },
            Dense {
                weight: Array2::zeros((2, 5)),
                bias: Array1::zeros(2),
            },
        ];
        let e = Embedder::from_layers(layers, Activation::Tanh).unwrap();
        let out = e.embed(&array![[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(out, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let e = Embedder::from_layers(
            vec![Dense {
                weight: Array2::eye(3),
                bias: Array1::zeros(3),
            }],
            Activation::Relu,
        )
        .unwrap();
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -0.1]];
        assert_eq!(e.embed(&x).unwrap(), x);
    }

    #[test]
    fn shapes_must_chain() {
        let layers = vec![
            Dense {
                weight: Array2::zeros((5, 3)),
                bias: Array1::zeros(5),
            },
            Dense {
                weight: Array2::zeros((2, 4)),
                bias: Array1::zeros(2),
            },
        ];
        assert!(Embedder::from_layers(layers, Activation::Relu).is_err());
    }

    #[test]
    fn single_linear_layer_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = Embedder::new(3, &[], 2, Activation::Relu, &mut rng).unwrap();
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]];
        let cache = e.forward(&x).unwrap();
        let g = array![[0.1, -0.2], [0.3, 0.4]];
        let grads = e.backward(&cache, &g).unwrap();
        assert_eq!(grads.layers[0].weight, g.t().dot(&x));
        assert_eq!(grads.layers[0].bias, array![0.4, 0.2]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = Embedder::new(4, &[6], 3, Activation::Tanh, &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let cache = e.forward(&x).unwrap();
        let grads = e.backward(&cache, &Array2::zeros((3, 3))).unwrap();
        for k in 0..grads.num_tensors() {
            assert!(grads.tensor(k).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_cache_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut e = Embedder::new(2, &[3], 2, Activation::Relu, &mut rng).unwrap();
        let cache = e.forward(&array![[1.0, 1.0]]).unwrap();
        e.tensor_mut(0)[0] += 1.0;
        assert!(matches!(
            e.backward(&cache, &array![[1.0, 1.0]]),
            Err(DdclError::StaleCache { .. })
        ));
    }

    #[test]
    fn random_inputs_give_finite_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = Embedder::new(8, &[64], 8, Activation::Relu, &mut rng).unwrap();
        let dist = Normal::new(0.0, 10.0).unwrap();
        let x = Array2::from_shape_simple_fn((50, 8), || dist.sample(&mut rng));
        assert!(e.embed(&x).unwrap().iter().all(|v| v.is_finite()));
    }
}
