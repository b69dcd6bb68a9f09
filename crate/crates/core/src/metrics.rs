//! Accuracy bookkeeping and embedding-space diagnostics: inter- and
//! intra-class cosine distances, their empirical CDFs, and the
//! class-separation degree `1 - d_within / d_total`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::geometry::{compute_prototype, cosine, normalize, PrototypeClassifier};

/// `1 - cos(w_i, w_j)`, in `[0, 2]`.
pub fn inter_class_distance(w_i: &[f64], w_j: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(w_i, w_j)?)
}

/// Mean of `1 - cos(z, w_k)` over the class's samples.
pub fn intra_class_distance<V: AsRef<[f64]>>(samples: &[V], w_k: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("intra-class samples"));
    }
    let mut total = 0.0;
    for z in samples {
        total += 1.0 - cosine(z.as_ref(), w_k)?;
    }
    Ok(total / samples.len() as f64)
}

/// Within-class and total mean cosine distances over a labeled set.
///
/// Both double sums include self-pairs. With unit vectors `u`, the sum of
/// cosines over a block of pairs is the dot product of the block sums, so
/// `d_within = 1 - (1/C) sum_c |mean_c u|^2` and
/// `d_total = 1 - |(1/C) sum_c mean_c u|^2`.
pub fn within_and_total_distance<V: AsRef<[f64]>>(embeddings: &[V], labels: &[u32]) -> Result<(f64, f64)> {
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            found: labels.len(),
        });
    }
    if embeddings.len() < 2 {
        return Err(Error::invalid("class separation needs at least two samples"));
    }
    let d = embeddings[0].as_ref().len();
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (z, &y) in embeddings.iter().zip(labels) {
        let z = z.as_ref();
        if z.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: z.len(),
            });
        }
        let u = normalize(z)?;
        let entry = sums.entry(y).or_insert_with(|| (vec![0.0; d], 0));
        for (s, v) in entry.0.iter_mut().zip(&u) {
            *s += v;
        }
        entry.1 += 1;
    }
    let c = sums.len() as f64;
    let mut within = 0.0;
    let mut grand = vec![0.0; d];
    for (sum, n) in sums.values() {
        let mean: Vec<f64> = sum.iter().map(|v| v / *n as f64).collect();
        within += crate::geometry::dot(&mean, &mean);
        for (g, m) in grand.iter_mut().zip(&mean) {
            *g += m / c;
        }
    }
    let d_within = 1.0 - within / c;
    let d_total = 1.0 - crate::geometry::dot(&grand, &grand);
    Ok((d_within, d_total))
}

/// `1 - d_within / d_total`; errors when every embedding points the same way.
pub fn class_separation<V: AsRef<[f64]>>(embeddings: &[V], labels: &[u32]) -> Result<f64> {
    let (within, total) = within_and_total_distance(embeddings, labels)?;
    if total.abs() < 1e-15 {
        return Err(Error::UndefinedSeparation);
    }
    Ok(1.0 - within / total)
}

pub const CDF_GRID_POINTS: usize = 201;

/// Empirical CDF of `values` on an evenly spaced grid over `[0, 2]`.
pub fn cumulative_distance_distribution(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    (0..CDF_GRID_POINTS)
        .map(|i| {
            let t = 2.0 * i as f64 / (CDF_GRID_POINTS - 1) as f64;
            let count = sorted.partition_point(|v| *v <= t);
            (t, count as f64 / n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session_index: usize,
    pub total_accuracy: f64,
    /// Accuracy on test samples of base-session classes.
    pub base_accuracy: Option<f64>,
    /// Accuracy on test samples of classes introduced after the base session;
    /// absent while no such classes exist.
    pub novel_accuracy: Option<f64>,
    pub per_class_accuracy: BTreeMap<u32, f64>,
    /// Row/column order of `confusion`.
    pub class_ids: Vec<u32>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
}

impl SessionResult {
    pub fn test_count(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Tallies predictions against labels. `classes` fixes the confusion order
/// and must cover every label and prediction.
pub fn evaluate_predictions(
    session_index: usize,
    classes: &[u32],
    labels: &[u32],
    predictions: &[u32],
    base_class_ids: &[u32],
) -> Result<SessionResult> {
    if labels.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let pos: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let base: BTreeSet<u32> = base_class_ids.iter().copied().collect();
    let mut confusion = vec![vec![0u64; classes.len()]; classes.len()];
    let (mut base_n, mut base_ok, mut novel_n, mut novel_ok) = (0u64, 0u64, 0u64, 0u64);
    for (&y, &p) in labels.iter().zip(predictions) {
        let yi = *pos.get(&y).ok_or(Error::UncoveredClass(y))?;
        let pi = *pos.get(&p).ok_or(Error::UncoveredClass(p))?;
        confusion[yi][pi] += 1;
        let ok = (y == p) as u64;
        if base.contains(&y) {
            base_n += 1;
            base_ok += ok;
        } else {
            novel_n += 1;
            novel_ok += ok;
        }
    }
    let per_class_accuracy = classes
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| {
            let n: u64 = confusion[i].iter().sum();
            (n > 0).then(|| (c, confusion[i][i] as f64 / n as f64))
        })
        .collect();
    let correct: u64 = (0..classes.len()).map(|i| confusion[i][i]).sum();
    let ratio = |ok: u64, n: u64| (n > 0).then(|| ok as f64 / n as f64);
    Ok(SessionResult {
        session_index,
        total_accuracy: correct as f64 / labels.len() as f64,
        base_accuracy: ratio(base_ok, base_n),
        novel_accuracy: ratio(novel_ok, novel_n),
        per_class_accuracy,
        class_ids: classes.to_vec(),
        confusion,
    })
}

/// Anything that maps images to embedding vectors.
pub trait Embedder {
    fn embed(&self, samples: &[&LabeledSample]) -> Result<Vec<Vec<f64>>>;
}

/// Embeds the test set, classifies every sample, and tallies the result.
pub fn evaluate_session<E: Embedder + ?Sized>(
    session_index: usize,
    classifier: &PrototypeClassifier,
    encoder: &E,
    test_set: &[&LabeledSample],
    base_class_ids: &[u32],
) -> Result<(SessionResult, Vec<Vec<f64>>)> {
    let classes = classifier.class_ids();
    let known: BTreeSet<u32> = classes.iter().copied().collect();
    if let Some(s) = test_set.iter().find(|s| !known.contains(&s.label)) {
        return Err(Error::UncoveredClass(s.label));
    }
    let embeddings = encoder.embed(test_set)?;
    let mut predictions = Vec::with_capacity(test_set.len());
    for e in &embeddings {
        predictions.push(classifier.classify(e)?.0);
    }
    let labels: Vec<u32> = test_set.iter().map(|s| s.label).collect();
    let result = evaluate_predictions(session_index, &classes, &labels, &predictions, base_class_ids)?;
    Ok((result, embeddings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationScores {
    pub all: f64,
    pub base: Option<f64>,
    pub novel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub session_index: usize,
    pub class_ids: Vec<u32>,
    /// Symmetric, zero diagonal, in `class_ids` order.
    pub inter_class: Vec<Vec<f64>>,
    pub intra_class: BTreeMap<u32, f64>,
    pub separation: SeparationScores,
}

impl GeometryReport {
    /// Off-diagonal upper-triangle inter-class distances.
    pub fn inter_values(&self) -> Vec<f64> {
        let n = self.class_ids.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.inter_class[i][j])
            .collect()
    }

    pub fn intra_values(&self) -> Vec<f64> {
        self.intra_class.values().copied().collect()
    }
}

/// Geometry of a labeled embedding set. Prototypes are the per-class means of
/// the given embeddings.
pub fn geometry_report<V: AsRef<[f64]>>(
    session_index: usize,
    embeddings: &[V],
    labels: &[u32],
    base_class_ids: &[u32],
) -> Result<GeometryReport> {
    let mut groups: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    for (z, &y) in embeddings.iter().zip(labels) {
        groups.entry(y).or_default().push(z.as_ref());
    }
    let class_ids: Vec<u32> = groups.keys().copied().collect();
    let protos = groups
        .iter()
        .map(|(&c, zs)| compute_prototype(c, zs).and_then(|p| p.normalized()))
        .collect::<Result<Vec<_>>>()?;
    let n = protos.len();
    let mut inter = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = inter_class_distance(&protos[i].vector, &protos[j].vector)?;
            inter[i][j] = v;
            inter[j][i] = v;
        }
    }
    let mut intra = BTreeMap::new();
    for (p, zs) in protos.iter().zip(groups.values()) {
        intra.insert(p.class_id, intra_class_distance(zs, &p.vector)?);
    }
    let base: BTreeSet<u32> = base_class_ids.iter().copied().collect();
    let subset = |want_base: bool| -> Result<Option<f64>> {
        let (zs, ys): (Vec<&[f64]>, Vec<u32>) = embeddings
            .iter()
            .zip(labels)
            .filter(|(_, y)| base.contains(y) == want_base)
            .map(|(z, &y)| (z.as_ref(), y))
            .unzip();
        let distinct: BTreeSet<u32> = ys.iter().copied().collect();
        if distinct.len() < 2 {
            return Ok(None);
        }
        class_separation(&zs, &ys).map(Some)
    };
    Ok(GeometryReport {
        session_index,
        class_ids,
        inter_class: inter,
        intra_class: intra,
        separation: SeparationScores {
            all: class_separation(embeddings, labels)?,
            base: subset(true)?,
            novel: subset(false)?,
        },
    })
}
