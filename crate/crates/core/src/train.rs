//! Building blocks shared by the training stages: linear heads, row
//! normalisation with its backward pass, and the prototype cross-entropy.

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, LossOutput};
use crate::model::images_to_tensor;
use crate::nn::{Layer, Network, ParamSet, Sequential, Sgd, SgdConfig};
use crate::tensor::Tensor;

/// Forward pass of a batch of images; returns the f64 embedding rows and
/// the trace for the backward pass.
pub fn forward_images<N: Network>(net: &N, images: &[Image]) -> Result<(Vec<f64>, Tensor, N::Trace)> {
    let refs: Vec<&Image> = images.iter().collect();
    let x = images_to_tensor(&refs)?;
    let (z, trace) = net.forward_with(net.params(), &x)?;
    let rows = z.data().iter().map(|v| *v as f64).collect();
    Ok((rows, z, trace))
}

/// Backpropagates an f64 gradient on the embedding rows.
pub fn backward_rows<N: Network>(net: &N, trace: &N::Trace, z: &Tensor, grad: &[f64]) -> Result<ParamSet> {
    if grad.len() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            found: grad.len(),
        });
    }
    let g = Tensor::from_vec(z.shape(), grad.iter().map(|v| *v as f32).collect())?;
    net.backward_with(net.params(), trace, &g)
}

/// Row-wise L2 normalisation. Returns the unit rows and the original norms.
pub fn normalize_rows(z: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut u = z.to_vec();
    let mut norms = Vec::with_capacity(z.len() / d);
    for row in u.chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((u, norms))
}

/// Chains a gradient on `u = z / |z|` back to `z`.
pub fn normalize_backward(u: &[f64], norms: &[f64], grad_u: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    for (r, n) in norms.iter().enumerate() {
        let (ur, gr) = (&u[r * d..(r + 1) * d], &grad_u[r * d..(r + 1) * d]);
        let dot: f64 = ur.iter().zip(gr).map(|(a, b)| a * b).sum();
        for t in 0..d {
            out[r * d + t] = (gr[t] - ur[t] * dot) / n;
        }
    }
    out
}

/// Cross-entropy over `scale * cos(z_i, p_j)` for unit prototypes `p_j`.
/// The gradient is with respect to the raw rows `z`.
pub fn prototype_cross_entropy(
    z: &[f64],
    d: usize,
    unit_prototypes: &[Vec<f64>],
    targets: &[usize],
    scale: f64,
) -> Result<LossOutput> {
    let k = unit_prototypes.len();
    let (u, norms) = normalize_rows(z, d)?;
    let rows = norms.len();
    let mut logits = vec![0.0; rows * k];
    for r in 0..rows {
        let ur = &u[r * d..(r + 1) * d];
        for (j, p) in unit_prototypes.iter().enumerate() {
            logits[r * k + j] = scale * ur.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let ce = cross_entropy(&logits, k, targets)?;
    let mut grad_u = vec![0.0; u.len()];
    for r in 0..rows {
        for (j, p) in unit_prototypes.iter().enumerate() {
            let g = scale * ce.grad[r * k + j];
            for t in 0..d {
                grad_u[r * d + t] += g * p[t];
            }
        }
    }
    Ok(LossOutput {
        value: ce.value,
        grad: normalize_backward(&u, &norms, &grad_u, d),
    })
}

/// Trainable linear classifier on embedding rows.
#[derive(Debug, Clone)]
pub struct LinearHead {
    net: Sequential,
    opt: Sgd,
    in_features: usize,
    out_features: usize,
}

impl LinearHead {
    pub fn new<R: Rng + ?Sized>(name: &str, in_features: usize, out_features: usize, sgd: SgdConfig, rng: &mut R) -> Self {
        let net = Sequential::new(
            vec![Layer::Linear {
                name: name.into(),
                in_features,
                out_features,
                bias: true,
            }],
            rng,
        );
        let opt = Sgd::new(sgd, net.params());
        LinearHead {
            net,
            opt,
            in_features,
            out_features,
        }
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    fn weight(&self) -> &[f32] {
        self.net.params().values().find(|t| t.shape().len() == 2).expect("weight").data()
    }

    fn bias(&self) -> &[f32] {
        self.net.params().values().find(|t| t.shape().len() == 1).expect("bias").data()
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        let (k, n) = (self.in_features, self.out_features);
        let (w, b) = (self.weight(), self.bias());
        z.chunks_exact(k)
            .flat_map(|row| {
                (0..n).map(move |o| {
                    b[o] as f64 + row.iter().zip(&w[o * k..(o + 1) * k]).map(|(x, w)| x * *w as f64).sum::<f64>()
                })
            })
            .collect()
    }

    /// Gradients of a logit-space gradient: `(d/dz, d/dparams * weight)`.
    pub fn backward(&self, z: &[f64], grad_logits: &[f64], weight: f64) -> Result<(Vec<f64>, ParamSet)> {
        let (k, n) = (self.in_features, self.out_features);
        let w = self.weight();
        let rows = z.len() / k;
        let mut gz = vec![0.0; z.len()];
        let mut gw = vec![0.0f64; n * k];
        let mut gb = vec![0.0f64; n];
        for r in 0..rows {
            for o in 0..n {
                let g = grad_logits[r * n + o];
                gb[o] += g;
                for t in 0..k {
                    gz[r * k + t] += g * w[o * k + t] as f64;
                    gw[o * k + t] += g * z[r * k + t];
                }
            }
        }
        let mut grads = ParamSet::new();
        for (key, t) in self.net.params() {
            let src = if t.shape().len() == 2 { &gw } else { &gb };
            grads.insert(
                key.clone(),
                Tensor::from_vec(t.shape(), src.iter().map(|v| (v * weight) as f32).collect())?,
            );
        }
        Ok((gz, grads))
    }

    pub fn step(&mut self, grads: &ParamSet, lr: f32) {
        self.opt.step(self.net.params_mut(), grads, lr, None);
    }
}
