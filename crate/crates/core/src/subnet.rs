//! Subnetwork masks and masked incremental tuning.
//!
//! After base training a binary mask selects the parameters whose removal
//! would hurt the base objective most. During incremental sessions the masked
//! parameters, and every parameter under a frozen shallow-layer prefix, stay
//! fixed; only the remainder is fine-tuned with a small learning rate.

use std::collections::BTreeMap;

use base64::Engine;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{param_count, Network, ParamSet, Sgd, SgdConfig};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Per-parameter binary indicators; `true` marks a subnetwork (kept) weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetMask {
    pub retain_fraction: f64,
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl SubnetMask {
    pub fn all_ones(params: &ParamSet) -> Self {
        SubnetMask {
            retain_fraction: 1.0,
            masks: params
                .iter()
                .map(|(k, v)| (k.clone(), vec![true; v.len()]))
                .collect(),
        }
    }

    pub fn all_zeros(params: &ParamSet) -> Self {
        SubnetMask {
            retain_fraction: 0.0,
            masks: params
                .iter()
                .map(|(k, v)| (k.clone(), vec![false; v.len()]))
                .collect(),
        }
    }

    pub fn ones(&self) -> usize {
        self.masks.values().map(|m| m.iter().filter(|b| **b).count()).sum()
    }

    pub fn len(&self) -> usize {
        self.masks.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ones_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.ones() as f64 / self.len() as f64
        }
    }

    pub fn check_shapes(&self, params: &ParamSet) -> Result<()> {
        if self.masks.len() != params.len() {
            return Err(Error::ShapeMismatch {
                name: "mask layer set".into(),
            });
        }
        for (k, v) in params {
            match self.masks.get(k) {
                Some(m) if m.len() == v.len() => {}
                _ => return Err(Error::ShapeMismatch { name: k.clone() }),
            }
        }
        Ok(())
    }

    pub fn to_packed(&self) -> PackedMask {
        let engine = base64::engine::general_purpose::STANDARD;
        PackedMask {
            retain_fraction: self.retain_fraction,
            layers: self
                .masks
                .iter()
                .map(|(k, bits)| {
                    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
                    for (i, b) in bits.iter().enumerate() {
                        if *b {
                            bytes[i / 8] |= 1 << (i % 8);
                        }
                    }
                    (
                        k.clone(),
                        PackedBits {
                            len: bits.len(),
                            bits: engine.encode(bytes),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_packed(p: &PackedMask) -> Result<Self> {
        let engine = base64::engine::general_purpose::STANDARD;
        let mut masks = BTreeMap::new();
        for (k, packed) in &p.layers {
            let bytes = engine
                .decode(&packed.bits)
                .map_err(|e| Error::Checkpoint(format!("mask `{k}`: {e}")))?;
            if bytes.len() != packed.len.div_ceil(8) {
                return Err(Error::Checkpoint(format!("mask `{k}` has the wrong length")));
            }
            let bits = (0..packed.len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
            masks.insert(k.clone(), bits);
        }
        Ok(SubnetMask {
            retain_fraction: p.retain_fraction,
            masks,
        })
    }
}

/// Serialized mask: layer name to a base64 packed bitset (LSB first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedMask {
    pub retain_fraction: f64,
    pub layers: BTreeMap<String, PackedBits>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedBits {
    pub len: usize,
    pub bits: String,
}

impl Serialize for SubnetMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_packed().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SubnetMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let p = PackedMask::deserialize(d)?;
        SubnetMask::from_packed(&p).map_err(serde::de::Error::custom)
    }
}

/// `theta ⊙ m`.
pub fn masked_params(params: &ParamSet, mask: &SubnetMask) -> Result<ParamSet> {
    mask.check_shapes(params)?;
    Ok(params
        .iter()
        .map(|(k, v)| {
            let m = &mask.masks[k];
            let mut t = v.clone();
            for (x, keep) in t.data_mut().iter_mut().zip(m) {
                if !keep {
                    *x = 0.0;
                }
            }
            (k.clone(), t)
        })
        .collect())
}

/// Forward pass with every parameter multiplied by its mask bit.
pub fn apply_mask_forward<N: Network>(net: &N, mask: &SubnetMask, input: &Tensor) -> Result<Tensor> {
    let p = masked_params(net.params(), mask)?;
    net.forward_with(&p, input).map(|(y, _)| y)
}

/// Loss of a network output batch: `(value, d value / d output)`.
pub type Objective<'a> = dyn Fn(&Tensor, &[usize]) -> Result<(f64, Tensor)> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Scores start at `|theta|` and are trained through the binarised mask
    /// with a straight-through gradient.
    Learned,
    /// Plain weight-magnitude top-k.
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSearchConfig {
    pub retain_fraction: f64,
    pub steps: usize,
    pub score_lr: f64,
    pub batch_size: usize,
    pub mode: ScoreMode,
}

impl Default for MaskSearchConfig {
    fn default() -> Self {
        MaskSearchConfig {
            retain_fraction: 0.9,
            steps: 50,
            score_lr: 0.01,
            batch_size: 64,
            mode: ScoreMode::Learned,
        }
    }
}

/// Keeps the `round(fraction * n)` highest scores (ties to lower index).
fn top_fraction(scores: &BTreeMap<String, Vec<f64>>, fraction: f64) -> BTreeMap<String, Vec<bool>> {
    let flat: Vec<(usize, f64)> = scores.values().flatten().copied().enumerate().collect();
    let keep = ((fraction * flat.len() as f64).round() as usize).clamp(1.min(flat.len()), flat.len());
    let mut order: Vec<(usize, f64)> = flat;
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut bits = vec![false; order.len()];
    for (i, _) in order.into_iter().take(keep) {
        bits[i] = true;
    }
    let mut out = BTreeMap::new();
    let mut offset = 0;
    for (k, v) in scores {
        out.insert(k.clone(), bits[offset..offset + v.len()].to_vec());
        offset += v.len();
    }
    out
}

/// Mean objective of the masked network minus that of the full network.
pub fn subnet_gap<N: Network>(
    net: &N,
    mask: &SubnetMask,
    inputs: &Tensor,
    labels: &[usize],
    objective: &Objective<'_>,
) -> Result<f64> {
    let (full, _) = net.forward_with(net.params(), inputs)?;
    let (masked, _) = net.forward_with(&masked_params(net.params(), mask)?, inputs)?;
    Ok(objective(&masked, labels)?.0 - objective(&full, labels)?.0)
}

/// Searches a binary mask keeping `retain_fraction` of all parameters such
/// that the masked network's objective stays close to the full network's.
pub fn extract_subnet_mask<N: Network>(
    net: &N,
    inputs: &Tensor,
    labels: &[usize],
    objective: &Objective<'_>,
    cfg: &MaskSearchConfig,
    seed: u64,
) -> Result<SubnetMask> {
    if !(cfg.retain_fraction > 0.0 && cfg.retain_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "retain fraction must lie in (0, 1], got {}",
            cfg.retain_fraction
        )));
    }
    if inputs.rows() == 0 || labels.is_empty() {
        return Err(Error::Empty("mask search data"));
    }
    if inputs.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.rows(),
            found: labels.len(),
        });
    }
    let params = net.params();
    if cfg.retain_fraction == 1.0 {
        return Ok(SubnetMask::all_ones(params));
    }
    let mut scores: BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(k, v)| (k.clone(), v.data().iter().map(|x| x.abs() as f64).collect()))
        .collect();

    if cfg.mode == ScoreMode::Learned && cfg.steps > 0 {
        let mut rng = rng_for(seed, "mask-search", 0);
        let n = labels.len();
        let bs = cfg.batch_size.clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        for _ in 0..cfg.steps {
            if cursor + bs > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let rows: Vec<&[f32]> = idx.iter().map(|&i| inputs.row(i)).collect();
            let x = Tensor::stack(&rows, &inputs.shape()[1..])?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

            let mask = SubnetMask {
                retain_fraction: cfg.retain_fraction,
                masks: top_fraction(&scores, cfg.retain_fraction),
            };
            let eff = masked_params(params, &mask)?;
            let (out, trace) = net.forward_with(&eff, &x)?;
            let (_, grad_out) = objective(&out, &y)?;
            let grads = net.backward_with(&eff, &trace, &grad_out)?;
            // d L / d m = d L / d theta_eff * theta, passed straight through
            // the binarisation to the scores.
            for (k, s) in scores.iter_mut() {
                let g = grads[k].data();
                let w = params[k].data();
                for i in 0..s.len() {
                    s[i] -= cfg.score_lr * (g[i] * w[i]) as f64;
                }
            }
        }
    }
    Ok(SubnetMask {
        retain_fraction: cfg.retain_fraction,
        masks: top_fraction(&scores, cfg.retain_fraction),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningPolicy {
    /// Layer-name prefixes whose parameters never change.
    pub frozen_layer_prefixes: Vec<String>,
    pub incremental_lr: f32,
    pub epochs_per_session: usize,
}

impl TuningPolicy {
    /// Tunes only the last block of the given block list.
    pub fn last_block_only(blocks: &[String], incremental_lr: f32, epochs_per_session: usize) -> Self {
        TuningPolicy {
            frozen_layer_prefixes: blocks[..blocks.len().saturating_sub(1)].to_vec(),
            incremental_lr,
            epochs_per_session,
        }
    }
}

fn under_prefix(param: &str, prefix: &str) -> bool {
    param == prefix
        || param
            .strip_prefix(prefix)
            .is_some_and(|rest| rest.starts_with('.'))
}

/// Elements that incremental tuning must leave untouched: the union of the
/// subnetwork mask and every parameter under a frozen prefix.
pub fn frozen_elements<N: Network>(
    net: &N,
    mask: &SubnetMask,
    policy: &TuningPolicy,
) -> Result<BTreeMap<String, Vec<bool>>> {
    mask.check_shapes(net.params())?;
    let layers = net.layer_names();
    for p in &policy.frozen_layer_prefixes {
        if !layers.iter().any(|l| under_prefix(l, p)) {
            return Err(Error::UnknownLayer(p.clone()));
        }
    }
    Ok(mask
        .masks
        .iter()
        .map(|(k, m)| {
            let whole = policy.frozen_layer_prefixes.iter().any(|p| under_prefix(k, p));
            (k.clone(), m.iter().map(|&b| b || whole).collect())
        })
        .collect())
}

/// Loss and parameter gradients for one mini-batch of sample indices.
pub type StepObjective<'a, N> =
    dyn FnMut(&N, &[usize], &mut rand_chacha::ChaCha8Rng) -> Result<(f64, ParamSet)> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub tunable_parameters: usize,
}

/// Fine-tunes the parameters outside the mask and the frozen prefixes with
/// plain SGD at `policy.incremental_lr`.
#[allow(clippy::too_many_arguments)]
pub fn incremental_tune<N: Network>(
    net: &mut N,
    mask: &SubnetMask,
    policy: &TuningPolicy,
    sgd: SgdConfig,
    n_samples: usize,
    batch_size: usize,
    seed: u64,
    objective: &mut StepObjective<'_, N>,
) -> Result<TuneReport> {
    let frozen = frozen_elements(net, mask, policy)?;
    let tunable = frozen.values().flatten().filter(|f| !**f).count();
    let mut report = TuneReport {
        steps: 0,
        losses: Vec::new(),
        tunable_parameters: tunable,
    };
    if policy.epochs_per_session == 0 || n_samples == 0 || tunable == 0 {
        return Ok(report);
    }
    let mut opt = Sgd::new(sgd, net.params());
    let bs = batch_size.clamp(1, n_samples);
    for epoch in 0..policy.epochs_per_session {
        let mut rng = rng_for(seed, "tune-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(bs) {
            let (loss, grads) = objective(net, idx, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "incremental".into(),
                    epoch,
                });
            }
            opt.step(net.params_mut(), &grads, policy.incremental_lr, Some(&frozen));
            report.losses.push(loss);
            report.steps += 1;
        }
    }
    debug_assert!(param_count(net.params()) >= tunable);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Sequential};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mse(out: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let n = out.rows() as f64;
        let mut g = out.clone();
        let mut total = 0.0;
        for r in 0..out.rows() {
            let k = out.row_len();
            for c in 0..k {
                let target = if c == labels[r] { 1.0 } else { 0.0 };
                let diff = out.row(r)[c] as f64 - target;
                total += diff * diff;
                g.data_mut()[r * k + c] = (2.0 * diff / n) as f32;
            }
        }
        Ok((total / n, g))
    }

    fn toy_net(seed: u64) -> Sequential {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sequential::new(
            vec![
                Layer::Linear { name: "l1".into(), in_features: 4, out_features: 6, bias: false },
                Layer::Relu,
                Layer::Linear { name: "l2".into(), in_features: 6, out_features: 3, bias: false },
            ],
            &mut rng,
        )
    }

    fn toy_data(n: usize) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x: Vec<f32> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = (0..n).map(|i| i % 3).collect();
        (Tensor::from_vec(&[n, 4], x).unwrap(), y)
    }

    #[test]
    fn full_retention_has_zero_gap() {
        let net = toy_net(1);
        let (x, y) = toy_data(12);
        let cfg = MaskSearchConfig { retain_fraction: 1.0, ..Default::default() };
        let m = extract_subnet_mask(&net, &x, &y, &mse, &cfg, 0).unwrap();
        assert_eq!(m.ones(), m.len());
        assert_eq!(subnet_gap(&net, &m, &x, &y, &mse).unwrap(), 0.0);
    }

    #[test]
    fn mask_search_rejects_bad_arguments() {
        let net = toy_net(1);
        let (x, y) = toy_data(6);
        for f in [0.0, -0.5, 1.5] {
            let cfg = MaskSearchConfig { retain_fraction: f, ..Default::default() };
            assert!(extract_subnet_mask(&net, &x, &y, &mse, &cfg, 0).is_err());
        }
        let empty = Tensor::zeros(&[0, 4]);
        let cfg = MaskSearchConfig::default();
        assert!(matches!(extract_subnet_mask(&net, &empty, &[], &mse, &cfg, 0), Err(Error::Empty(_))));
    }

    #[test]
    fn masked_forward_matches_manual_product() {
        let net = toy_net(4);
        let (x, _) = toy_data(5);
        let ones = SubnetMask::all_ones(net.params());
        let a = apply_mask_forward(&net, &ones, &x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut mask = SubnetMask::all_ones(net.params());
        for m in mask.masks.values_mut() {
            m.iter_mut().for_each(|b| *b = rng.random::<bool>());
        }
        let out = apply_mask_forward(&net, &mask, &x).unwrap();
        let w1 = net.params()["l1.weight"].data();
        let w2 = net.params()["l2.weight"].data();
        let m1 = &mask.masks["l1.weight"];
        let m2 = &mask.masks["l2.weight"];
        for r in 0..5 {
            let xi = x.row(r);
            let mut h = [0f64; 6];
            for o in 0..6 {
                for i in 0..4 {
                    if m1[o * 4 + i] {
                        h[o] += w1[o * 4 + i] as f64 * xi[i] as f64;
                    }
                }
                h[o] = h[o].max(0.0);
            }
            for o in 0..3 {
                let mut v = 0.0;
                for i in 0..6 {
                    if m2[o * 6 + i] {
                        v += w2[o * 6 + i] as f64 * h[i];
                    }
                }
                assert!((out.row(r)[o] as f64 - v).abs() < 1e-6);
            }
        }

        let zeros = SubnetMask::all_zeros(net.params());
        let z = apply_mask_forward(&net, &zeros, &x).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = toy_net(1);
        let mut mask = SubnetMask::all_ones(net.params());
        mask.masks.get_mut("l1.weight").unwrap().pop();
        let (x, _) = toy_data(2);
        assert!(matches!(apply_mask_forward(&net, &mask, &x), Err(Error::ShapeMismatch { .. })));
    }

    /// `out = A x + B x` with `B = 0`: B contributes nothing, so a half-size
    /// mask must keep all of A.
    struct TwoBranch {
        params: ParamSet,
    }

    impl Network for TwoBranch {
        type Trace = Tensor;
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn forward_with(&self, p: &ParamSet, x: &Tensor) -> Result<(Tensor, Tensor)> {
            let (a, b) = (p["used.weight"].data(), p["unused.weight"].data());
            let mut out = Tensor::zeros(&[x.rows(), 3]);
            for r in 0..x.rows() {
                for o in 0..3 {
                    let mut v = 0.0;
                    for i in 0..3 {
                        v += (a[o * 3 + i] + b[o * 3 + i]) * x.row(r)[i];
                    }
                    out.data_mut()[r * 3 + o] = v;
                }
            }
            Ok((out, x.clone()))
        }
        fn backward_with(&self, p: &ParamSet, x: &Tensor, g: &Tensor) -> Result<ParamSet> {
            let mut grads = crate::nn::zeros_like(p);
            for key in ["used.weight", "unused.weight"] {
                let gw = grads.get_mut(key).unwrap().data_mut();
                for r in 0..x.rows() {
                    for o in 0..3 {
                        for i in 0..3 {
                            gw[o * 3 + i] += g.row(r)[o] * x.row(r)[i];
                        }
                    }
                }
            }
            Ok(grads)
        }
    }

    #[test]
    fn dead_branch_is_pruned_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let used: Vec<f32> = (0..9).map(|_| rng.random_range(0.2..1.0) * if rng.random() { 1.0 } else { -1.0 }).collect();
        params.insert("used.weight".into(), Tensor::from_vec(&[3, 3], used).unwrap());
        params.insert("unused.weight".into(), Tensor::zeros(&[3, 3]));
        let net = TwoBranch { params };
        let (x, y) = toy_data(30);
        let x = Tensor::from_vec(&[30, 3], x.data().chunks(4).flat_map(|r| r[..3].to_vec()).collect()).unwrap();
        let cfg = MaskSearchConfig { retain_fraction: 0.5, steps: 30, batch_size: 10, ..Default::default() };
        let m = extract_subnet_mask(&net, &x, &y, &mse, &cfg, 3).unwrap();
        assert!(m.masks["used.weight"].iter().all(|b| *b));
        assert!(m.masks["unused.weight"].iter().all(|b| !*b));
        assert!(subnet_gap(&net, &m, &x, &y, &mse).unwrap().abs() < 1e-6);
    }

    #[test]
    fn mask_extraction_is_deterministic() {
        let net = toy_net(5);
        let (x, y) = toy_data(20);
        let cfg = MaskSearchConfig { retain_fraction: 0.6, steps: 20, batch_size: 8, ..Default::default() };
        let a = extract_subnet_mask(&net, &x, &y, &mse, &cfg, 7).unwrap();
        let b = extract_subnet_mask(&net, &x, &y, &mse, &cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ones(), (0.6f64 * a.len() as f64).round() as usize);
    }

    #[test]
    fn packed_mask_roundtrip() {
        let net = toy_net(5);
        let mut mask = SubnetMask::all_ones(net.params());
        mask.retain_fraction = 0.5;
        mask.masks.get_mut("l2.weight").unwrap()[3] = false;
        let json = serde_json::to_string(&mask).unwrap();
        let back: SubnetMask = serde_json::from_str(&json).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn tuning_respects_freezing() {
        let mut net = toy_net(6);
        let (x, y) = toy_data(12);
        let mut mask = SubnetMask::all_zeros(net.params());
        for (i, b) in mask.masks.get_mut("l2.weight").unwrap().iter_mut().enumerate() {
            *b = i % 2 == 0;
        }
        let policy = TuningPolicy { frozen_layer_prefixes: vec!["l1".into()], incremental_lr: 0.05, epochs_per_session: 3 };
        let before = net.params().clone();
        let mut obj = |n: &Sequential, idx: &[usize], _: &mut ChaCha8Rng| -> Result<(f64, ParamSet)> {
            let rows: Vec<&[f32]> = idx.iter().map(|&i| x.row(i)).collect();
            let xb = Tensor::stack(&rows, &[4]).unwrap();
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let (out, trace) = n.forward_with(n.params(), &xb)?;
            let (l, g) = mse(&out, &yb)?;
            Ok((l, n.backward_with(n.params(), &trace, &g)?))
        };
        let report = incremental_tune(&mut net, &mask, &policy, SgdConfig::default(), 12, 4, 1, &mut obj).unwrap();
        assert_eq!(report.steps, 9);
        assert_eq!(report.tunable_parameters, 9);
        assert_eq!(net.params()["l1.weight"], before["l1.weight"]);
        let (a, b) = (net.params()["l2.weight"].data(), before["l2.weight"].data());
        let mut changed = 0;
        for i in 0..a.len() {
            if i % 2 == 0 {
                assert_eq!(a[i].to_bits(), b[i].to_bits());
            } else if a[i] != b[i] {
                changed += 1;
            }
        }
        assert!(changed > 0);

        let zero_epochs = TuningPolicy { epochs_per_session: 0, ..policy.clone() };
        let snapshot = net.params().clone();
        incremental_tune(&mut net, &mask, &zero_epochs, SgdConfig::default(), 12, 4, 1, &mut obj).unwrap();
        assert_eq!(net.params(), &snapshot);

        let bad = TuningPolicy { frozen_layer_prefixes: vec!["l9".into()], ..policy };
        assert!(matches!(
            incremental_tune(&mut net, &mask, &bad, SgdConfig::default(), 12, 4, 1, &mut obj),
            Err(Error::UnknownLayer(_))
        ));
    }
}
