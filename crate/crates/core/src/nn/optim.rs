use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{zeros_like, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// SGD with heavy-ball momentum; L2 decay is folded into the gradient
/// (`g + wd * p`).
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamSet) -> Self {
        Sgd {
            config,
            velocity: zeros_like(params),
        }
    }

    /// Applies one update. Elements flagged `true` in `frozen` are never
    /// touched, neither by the gradient nor by weight decay.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        lr: f32,
        frozen: Option<&BTreeMap<String, Vec<bool>>>,
    ) {
        let SgdConfig {
            momentum,
            weight_decay,
        } = self.config;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self
                .velocity
                .get_mut(name)
                .expect("optimizer state built from the same parameter set");
            let fmask = frozen.and_then(|f| f.get(name));
            if fmask.is_some_and(|m| m.iter().all(|&b| b)) {
                continue;
            }
            let (p, g, v) = (p.data_mut(), g.data(), v.data_mut());
            for i in 0..p.len() {
                if fmask.is_some_and(|m| m[i]) {
                    continue;
                }
                let d = g[i] + weight_decay * p[i];
                v[i] = momentum * v[i] + d;
                p[i] -= lr * v[i];
            }
        }
    }
}

/// Cosine-annealed learning rate for `step` of `total` steps.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}
