//! Training objectives with analytic gradients.
//!
//! All losses work in `f64` on row-major embedding matrices. Similarities are
//! plain dot products; callers pass L2-normalised rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EtfAssignment, EtfFrame, Prototype};

/// A batch of embeddings `z_i` with labels and optional view pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    dim: usize,
    embeddings: Vec<f64>,
    labels: Vec<u32>,
    pairing: Option<Vec<usize>>,
}

pub const UNIT_NORM_TOL: f64 = 1e-6;

impl EmbeddingBatch {
    /// Validated constructor: rows must be unit length.
    pub fn new(dim: usize, embeddings: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let b = Self::unchecked(dim, embeddings, labels)?;
        for (i, row) in b.rows().enumerate() {
            let n = crate::geometry::norm(row);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!("embedding row {i} has norm {n}")));
            }
        }
        Ok(b)
    }

    /// Normalises each row before construction.
    pub fn normalized(dim: usize, mut embeddings: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        for row in embeddings.chunks_exact_mut(dim) {
            let n = crate::geometry::norm(row);
            if n == 0.0 {
                return Err(Error::ZeroVector);
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self::new(dim, embeddings, labels)
    }

    /// Skips the unit-norm check. Meant for probing the losses away from the
    /// sphere, e.g. with finite differences.
    pub fn unchecked(dim: usize, embeddings: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 || embeddings.len() % dim != 0 {
            return Err(Error::invalid("embedding buffer is not a multiple of the dimension"));
        }
        if embeddings.len() / dim != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.len() / dim,
                found: labels.len(),
            });
        }
        Ok(EmbeddingBatch {
            dim,
            embeddings,
            labels,
            pairing: None,
        })
    }

    /// Attaches the view pairing `kappa`; it must be an involution without
    /// fixed points.
    pub fn with_pairing(mut self, pairing: Vec<usize>) -> Result<Self> {
        if pairing.len() != self.len() {
            return Err(Error::InvalidPairing(format!(
                "{} entries for {} rows",
                pairing.len(),
                self.len()
            )));
        }
        for (i, &k) in pairing.iter().enumerate() {
            if k >= pairing.len() || k == i || pairing[k] != i {
                return Err(Error::InvalidPairing(format!("row {i} maps to {k}")));
            }
        }
        self.pairing = Some(pairing);
        Ok(self)
    }

    /// Pairing for `[a_0..a_{b-1}, b_0..b_{b-1}]` stacked views.
    pub fn stacked_pairing(b: usize) -> Vec<usize> {
        (0..2 * b).map(|i| if i < b { i + b } else { i - b }).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn pairing(&self) -> Option<&[usize]> {
        self.pairing.as_deref()
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.embeddings.chunks_exact(self.dim)
    }
}

/// A scalar loss and its gradient with respect to the loss input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Supcon,
    Etf,
    Rotation,
    Selfsup,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Supcon => "supcon",
            LossKind::Etf => "etf",
            LossKind::Rotation => "rotation",
            LossKind::Selfsup => "selfsup",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub supcon: f64,
    pub etf: f64,
    pub rotation: f64,
    pub cross_entropy: f64,
    pub selfsup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            supcon: 0.0,
            etf: 0.0,
            rotation: 0.0,
            cross_entropy: 0.0,
            selfsup: 0.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::CrossEntropy => self.cross_entropy,
            LossKind::Supcon => self.supcon,
            LossKind::Etf => self.etf,
            LossKind::Rotation => self.rotation,
            LossKind::Selfsup => self.selfsup,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (LossKind, f64)> + '_ {
        [
            LossKind::CrossEntropy,
            LossKind::Supcon,
            LossKind::Etf,
            LossKind::Rotation,
            LossKind::Selfsup,
        ]
        .into_iter()
        .map(|k| (k, self.get(k)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub weights: LossWeights,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl LossConfig {
    /// Base-session defaults: SupCon and ETF alignment at 1, rotation at 0.5.
    pub fn base_default() -> Self {
        LossConfig {
            temperature: DEFAULT_TEMPERATURE,
            weights: LossWeights {
                supcon: 1.0,
                etf: 1.0,
                rotation: 0.5,
                ..LossWeights::default()
            },
        }
    }

    pub fn pretrain_default() -> Self {
        LossConfig {
            temperature: DEFAULT_TEMPERATURE,
            weights: LossWeights {
                selfsup: 1.0,
                ..LossWeights::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        let mut any = false;
        for (k, w) in self.weights.iter() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("weight `{}` must be non-negative", k.name())));
            }
            any |= w > 0.0;
        }
        if !any {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// Shared contrastive kernel: each anchor `i` with a non-empty positive set
/// contributes `LSE_{k != i}(s_ik) - mean_{j in P(i)} s_ij`, averaged over
/// such anchors.
fn contrastive(batch: &EmbeddingBatch, tau: f64, positives: &[Vec<usize>]) -> LossOutput {
    let n = batch.len();
    let d = batch.dim();
    let mut grad = vec![0.0; n * d];
    let anchors = positives.iter().filter(|p| !p.is_empty()).count();
    if anchors == 0 {
        return LossOutput { value: 0.0, grad };
    }
    let inv_a = 1.0 / anchors as f64;
    let mut total = 0.0;
    let mut sims = vec![0.0; n];
    let mut coef = vec![0.0; n];
    for i in 0..n {
        if positives[i].is_empty() {
            continue;
        }
        let zi = batch.row(i);
        let mut max = f64::NEG_INFINITY;
        for k in 0..n {
            if k == i {
                continue;
            }
            sims[k] = crate::geometry::dot(zi, batch.row(k)) / tau;
            max = max.max(sims[k]);
        }
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (sims[k] - max).exp();
            }
        }
        let lse = max + denom.ln();
        let np = positives[i].len() as f64;
        let pos_mean: f64 = positives[i].iter().map(|&j| sims[j]).sum::<f64>() / np;
        total += lse - pos_mean;

        for k in 0..n {
            coef[k] = if k == i { 0.0 } else { (sims[k] - lse).exp() };
        }
        for &j in &positives[i] {
            coef[j] -= 1.0 / np;
        }
        // d s_ik / d z_i = z_k / tau,  d s_ik / d z_k = z_i / tau
        for k in 0..n {
            let c = coef[k] * inv_a / tau;
            if c == 0.0 {
                continue;
            }
            let zk = batch.row(k);
            for t in 0..d {
                grad[i * d + t] += c * zk[t];
                grad[k * d + t] += c * zi[t];
            }
        }
    }
    LossOutput {
        value: total * inv_a,
        grad,
    }
}

/// Supervised contrastive loss. Positives of anchor `i` are the other rows
/// sharing its label; anchors without positives are left out of the average.
pub fn supcon_loss(batch: &EmbeddingBatch, tau: f64) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Empty("supcon batch"));
    }
    check_tau(tau)?;
    let labels = batch.labels();
    let positives: Vec<Vec<usize>> = (0..batch.len())
        .map(|i| {
            (0..batch.len())
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect()
        })
        .collect();
    Ok(contrastive(batch, tau, &positives))
}

/// Label-free contrastive loss over `2b` rows: the single positive of each
/// anchor is its paired view.
pub fn selfsup_contrastive_loss(batch: &EmbeddingBatch, tau: f64) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Empty("contrastive batch"));
    }
    check_tau(tau)?;
    let pairing = batch
        .pairing()
        .ok_or_else(|| Error::InvalidPairing("batch has no view pairing".into()))?;
    let positives: Vec<Vec<usize>> = pairing.iter().map(|&k| vec![k]).collect();
    Ok(contrastive(batch, tau, &positives))
}

/// Mean softmax cross-entropy over rows of a `rows x classes` logit matrix.
pub fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> Result<LossOutput> {
    if labels.is_empty() {
        return Err(Error::Empty("cross-entropy batch"));
    }
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::DimensionMismatch {
            expected: labels.len() * classes,
            found: logits.len(),
        });
    }
    let inv_b = 1.0 / labels.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::IndexOutOfRange { index: y, limit: classes });
        }
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + denom.ln();
        total += lse - row[y];
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            grad[r * classes + c] = (p - if c == y { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok(LossOutput {
        value: total * inv_b,
        grad,
    })
}

pub const ROTATIONS: usize = 4;

/// Four-way rotation prediction loss on `B x 4` logits.
pub fn rotation_loss(logits: &[f64], rotation_labels: &[usize]) -> Result<LossOutput> {
    if let Some(&bad) = rotation_labels.iter().find(|&&r| r >= ROTATIONS) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            limit: ROTATIONS,
        });
    }
    cross_entropy(logits, ROTATIONS, rotation_labels)
}

/// Mean squared distance between each learned prototype and its assigned
/// frame vector. The gradient has one row per learned prototype.
pub fn etf_alignment_loss(
    learned: &[Prototype],
    frame: &EtfFrame,
    assignment: &EtfAssignment,
) -> Result<LossOutput> {
    if learned.is_empty() {
        return Err(Error::Empty("etf prototypes"));
    }
    let d = frame.dim();
    let inv_c = 1.0 / learned.len() as f64;
    let mut grad = vec![0.0; learned.len() * d];
    let mut total = 0.0;
    for (i, p) in learned.iter().enumerate() {
        if p.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: p.dim(),
            });
        }
        let row = assignment
            .row_for(p.class_id)
            .ok_or(Error::UncoveredClass(p.class_id))?;
        let target = frame.row(row);
        for t in 0..d {
            let diff = p.vector[t] - target[t];
            total += diff * diff;
            grad[i * d + t] = 2.0 * diff * inv_c;
        }
    }
    Ok(LossOutput {
        value: total * inv_c,
        grad,
    })
}

/// Weighted sum of loss parts whose gradients share one input space.
pub fn composite_loss(parts: &BTreeMap<LossKind, LossOutput>, config: &LossConfig) -> Result<LossOutput> {
    let mut value = 0.0;
    let mut grad: Option<Vec<f64>> = None;
    for (kind, w) in config.weights.iter() {
        if w == 0.0 {
            continue;
        }
        let part = parts
            .get(&kind)
            .ok_or_else(|| Error::MissingLossPart(kind.name().to_string()))?;
        value += w * part.value;
        match &mut grad {
            None => grad = Some(part.grad.iter().map(|g| w * g).collect()),
            Some(acc) => {
                if acc.len() != part.grad.len() {
                    return Err(Error::DimensionMismatch {
                        expected: acc.len(),
                        found: part.grad.len(),
                    });
                }
                for (a, g) in acc.iter_mut().zip(&part.grad) {
                    *a += w * g;
                }
            }
        }
    }
    let grad = grad.ok_or(Error::Config("no loss part has a positive weight".into()))?;
    Ok(LossOutput { value, grad })
}
