//! Small neural-network substrate: named parameters, a sequential network
//! with manual backpropagation, SGD with momentum, and the reference encoder.

mod encoder;
mod layers;
mod optim;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use encoder::{build_encoder, EncoderSpec};
pub use layers::Layer;
pub use optim::{cosine_lr, Sgd, SgdConfig};

use layers::LayerCache;

/// Named parameter tensors, ordered by name.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Zeroed tensors with the same names and shapes as `params`.
pub fn zeros_like(params: &ParamSet) -> ParamSet {
    params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect()
}

pub fn param_count(params: &ParamSet) -> usize {
    params.values().map(Tensor::len).sum()
}

/// A differentiable function of an input batch and a named parameter set.
///
/// `forward_with`/`backward_with` take the parameters explicitly so callers
/// can evaluate the network at modified parameters (e.g. masked ones).
pub trait Network {
    type Trace;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    fn forward_with(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Self::Trace)>;

    /// Gradients of the parameters given the output gradient.
    fn backward_with(
        &self,
        params: &ParamSet,
        trace: &Self::Trace,
        grad_out: &Tensor,
    ) -> Result<ParamSet>;

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(self.params(), input).map(|(out, _)| out)
    }

    /// Names of parameterised layers, used to validate freezing prefixes.
    fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .params()
            .keys()
            .map(|k| k.rsplit_once('.').map_or(k.as_str(), |(l, _)| l).to_string())
            .collect();
        names.dedup();
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    layers: Vec<Layer>,
    params: ParamSet,
}

impl Sequential {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(layers: Vec<Layer>, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        for layer in &layers {
            let fan_in = layer.fan_in().max(1);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for (key, shape) in layer.param_shapes() {
                let mut t = Tensor::zeros(&shape);
                if key.ends_with(".weight") {
                    for v in t.data_mut() {
                        *v = normal.sample(rng) as f32;
                    }
                }
                params.insert(key, t);
            }
        }
        Sequential { layers, params }
    }

    /// Builds a network from explicit parameters, checking every shape.
    pub fn with_params(layers: Vec<Layer>, params: ParamSet) -> Result<Self> {
        let expected: usize = layers.iter().map(|l| l.param_shapes().len()).sum();
        if expected != params.len() {
            return Err(Error::ShapeMismatch {
                name: "parameter set".into(),
            });
        }
        for layer in &layers {
            for (key, shape) in layer.param_shapes() {
                match params.get(&key) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    _ => return Err(Error::ShapeMismatch { name: key }),
                }
            }
        }
        Ok(Sequential { layers, params })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

impl Network for Sequential {
    type Trace = Vec<LayerCacheHandle>;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_with(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Self::Trace)> {
        let mut x = input.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layers::forward(layer, params, &x)?;
            trace.push(LayerCacheHandle(cache));
            x = y;
        }
        Ok((x, trace))
    }

    fn backward_with(
        &self,
        params: &ParamSet,
        trace: &Self::Trace,
        grad_out: &Tensor,
    ) -> Result<ParamSet> {
        let mut grads = zeros_like(params);
        let mut g = grad_out.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(trace).enumerate().rev() {
            match layers::backward(layer, params, &cache.0, &g, &mut grads, i > 0)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(grads)
    }

    fn layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter_map(|l| l.name().map(str::to_string))
            .collect()
    }
}

/// Opaque forward-pass record of one layer.
#[derive(Debug, Clone)]
pub struct LayerCacheHandle(LayerCache);

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_and_grad(net: &Sequential, params: &ParamSet, x: &Tensor) -> (f64, ParamSet) {
        // loss = 0.5 * sum(out^2)
        let (out, trace) = net.forward_with(params, x).unwrap();
        let loss = out.data().iter().map(|v| 0.5 * (*v as f64).powi(2)).sum();
        let grads = net.backward_with(params, &trace, &out).unwrap();
        (loss, grads)
    }

    #[test]
    fn conv_net_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layers = vec![
            Layer::Conv3x3 { name: "c1".into(), in_channels: 2, out_channels: 3 },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Conv3x3 { name: "c2".into(), in_channels: 3, out_channels: 4 },
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Linear { name: "fc".into(), in_features: 4, out_features: 3, bias: true },
        ];
        let net = Sequential::new(layers, &mut rng);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Tensor::from_vec(
            &[2, 4, 4, 2],
            (0..64).map(|_| normal.sample(&mut rng) as f32).collect(),
        )
        .unwrap();
        let (l0, grads) = loss_and_grad(&net, net.params(), &x);
        let eps = 1e-3f32;
        let (mut checked, mut total) = (0, 0);
        for (name, g) in &grads {
            for idx in 0..g.len() {
                let mut p = net.params().clone();
                p.get_mut(name).unwrap().data_mut()[idx] += eps;
                let (lp, _) = loss_and_grad(&net, &p, &x);
                p.get_mut(name).unwrap().data_mut()[idx] -= 2.0 * eps;
                let (lm, _) = loss_and_grad(&net, &p, &x);
                total += 1;
                // One-sided slopes that disagree mean a ReLU or max-pool kink
                // lies inside the step.
                let (right, left) = ((lp - l0) / eps as f64, (l0 - lm) / eps as f64);
                if (right - left).abs() > 1e-2 * (1.0 + right.abs()) {
                    continue;
                }
                checked += 1;
                let fd = (lp - lm) / (2.0 * eps as f64);
                let an = g.data()[idx] as f64;
                assert!(
                    (fd - an).abs() <= 1e-2 * (1.0 + an.abs()),
                    "{name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
        assert!(checked * 4 >= total * 3, "only {checked} of {total} points were smooth");
    }

    #[test]
    fn with_params_rejects_bad_shapes() {
        let layers = vec![Layer::Linear { name: "fc".into(), in_features: 2, out_features: 2, bias: false }];
        let mut params = ParamSet::new();
        params.insert("fc.weight".into(), Tensor::zeros(&[3, 2]));
        assert!(Sequential::with_params(layers, params).is_err());
    }
}
