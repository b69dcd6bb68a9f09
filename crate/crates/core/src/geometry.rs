//! Prototypes, simplex equiangular tight frames, optimal frame-to-class
//! assignment and the expanding nearest-prototype classifier.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; fails on a zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: u32,
    pub vector: Vec<f64>,
    pub support_count: usize,
}

impl Prototype {
    /// Copy with a unit-length vector.
    pub fn normalized(&self) -> Result<Prototype> {
        Ok(Prototype {
            class_id: self.class_id,
            vector: normalize(&self.vector)?,
            support_count: self.support_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Arithmetic mean of one class's embeddings.
pub fn compute_prototype<V: AsRef<[f64]>>(class_id: u32, embeddings: &[V]) -> Result<Prototype> {
    let first = embeddings.first().ok_or(Error::Empty("prototype embeddings"))?;
    let d = first.as_ref().len();
    let mut sum = vec![0.0; d];
    for e in embeddings {
        let e = e.as_ref();
        if e.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: e.len(),
            });
        }
        for (s, v) in sum.iter_mut().zip(e) {
            *s += v;
        }
    }
    let n = embeddings.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    Ok(Prototype {
        class_id,
        vector: sum,
        support_count: embeddings.len(),
    })
}

/// `k` unit vectors in `R^d` with pairwise inner product `-1/(k-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtfFrame {
    k: usize,
    d: usize,
    /// Row-major `k x d`.
    vectors: Vec<f64>,
}

impl EtfFrame {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.d)
    }

    pub fn to_table(&self) -> PrototypeTable {
        PrototypeTable {
            class_ids: (0..self.k as u32).collect(),
            support_counts: vec![0; self.k],
            dim: self.d,
            values: self.vectors.clone(),
        }
    }

    pub fn from_table(table: &PrototypeTable) -> Result<Self> {
        let frame = EtfFrame {
            k: table.class_ids.len(),
            d: table.dim,
            vectors: table.values.clone(),
        };
        frame.check(1e-6)?;
        Ok(frame)
    }

    /// Verifies unit norms and the equiangular inner product.
    pub fn check(&self, tol: f64) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("an ETF needs at least two vectors"));
        }
        let target = -1.0 / (self.k as f64 - 1.0);
        for i in 0..self.k {
            if (norm(self.row(i)) - 1.0).abs() > tol {
                return Err(Error::invalid(format!("ETF row {i} is not unit length")));
            }
            for j in i + 1..self.k {
                if (dot(self.row(i), self.row(j)) - target).abs() > tol {
                    return Err(Error::invalid(format!("ETF rows {i},{j} are not equiangular")));
                }
            }
        }
        Ok(())
    }
}

/// Simplex ETF: the centred, rescaled standard basis of `R^k`, written in an
/// orthonormal basis of its `k-1`-dimensional span and lifted into `R^d` by a
/// seeded random orthonormal map.
pub fn make_etf_frame(k: usize, d: usize, seed: u64) -> Result<EtfFrame> {
    if k < 2 {
        return Err(Error::invalid("an ETF needs k >= 2"));
    }
    let r = k - 1;
    if d < r {
        return Err(Error::DimensionTooSmall { k, d });
    }
    // Helmert basis of the hyperplane orthogonal to the all-ones vector:
    // h_j = (1, .., 1, -j, 0, ..) / sqrt(j (j + 1)) with j ones.
    let scale = (k as f64 / r as f64).sqrt();
    let mut coords = vec![0.0; k * r];
    for i in 0..k {
        for j in 1..=r {
            let h = |m: usize| -> f64 {
                let denom = ((j * (j + 1)) as f64).sqrt();
                if m < j {
                    1.0 / denom
                } else if m == j {
                    -(j as f64) / denom
                } else {
                    0.0
                }
            };
            // (e_i - 1/k) . h_j, and h_j sums to zero.
            coords[i * r + (j - 1)] = scale * h(i);
        }
    }
    let lift = random_orthonormal_rows(r, d, seed);
    let mut vectors = vec![0.0; k * d];
    for i in 0..k {
        for j in 0..r {
            let c = coords[i * r + j];
            if c == 0.0 {
                continue;
            }
            for (out, u) in vectors[i * d..(i + 1) * d].iter_mut().zip(&lift[j * d..(j + 1) * d]) {
                *out += c * u;
            }
        }
    }
    Ok(EtfFrame { k, d, vectors })
}

/// `rows x cols` matrix with orthonormal rows (`rows <= cols`), from
/// Gram-Schmidt (applied twice) on Gaussian draws.
fn random_orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, "etf-lift", 0);
    let mut m: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    for i in 0..rows {
        for _ in 0..2 {
            for j in 0..i {
                let (head, tail) = m.split_at_mut(i * cols);
                let prev = &head[j * cols..(j + 1) * cols];
                let cur = &mut tail[..cols];
                let p = dot(prev, cur);
                for (c, v) in cur.iter_mut().zip(prev) {
                    *c -= p * v;
                }
            }
        }
        let row = &mut m[i * cols..(i + 1) * cols];
        let n = norm(row);
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    m
}

/// Class to frame-row assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtfAssignment {
    /// `(class_id, frame_row)` in the order of the learned prototypes.
    pub pairs: Vec<(u32, usize)>,
}

impl EtfAssignment {
    pub fn row_for(&self, class_id: u32) -> Option<usize> {
        self.pairs.iter().find(|(c, _)| *c == class_id).map(|(_, r)| *r)
    }

    /// Sum of cosines between each prototype and its assigned row.
    pub fn total_alignment(&self, frame: &EtfFrame, learned: &[Prototype]) -> Result<f64> {
        let mut total = 0.0;
        for p in learned {
            let row = self.row_for(p.class_id).ok_or(Error::UncoveredClass(p.class_id))?;
            total += cosine(&p.vector, frame.row(row))?;
        }
        Ok(total)
    }
}

/// One-to-one assignment of learned prototypes to frame rows maximising the
/// total cosine alignment.
pub fn assign_etf_prototypes(frame: &EtfFrame, learned: &[Prototype]) -> Result<EtfAssignment> {
    if learned.len() > frame.k() {
        return Err(Error::TooManyClasses {
            classes: learned.len(),
            rows: frame.k(),
        });
    }
    let mut ids = BTreeSet::new();
    let mut cost = Vec::with_capacity(learned.len());
    for p in learned {
        if !ids.insert(p.class_id) {
            return Err(Error::DuplicateClass(p.class_id));
        }
        if p.dim() != frame.dim() {
            return Err(Error::DimensionMismatch {
                expected: frame.dim(),
                found: p.dim(),
            });
        }
        let row: Result<Vec<f64>> = frame.rows().map(|r| cosine(&p.vector, r).map(|c| -c)).collect();
        cost.push(row?);
    }
    let cols = hungarian(&cost, frame.k());
    Ok(EtfAssignment {
        pairs: learned.iter().zip(cols).map(|(p, c)| (p.class_id, c)).collect(),
    })
}

/// Minimum-cost assignment of `n` rows to `m >= n` columns (Kuhn-Munkres with
/// potentials). Returns the column of each row.
pub(crate) fn hungarian(cost: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Cosine nearest-prototype classifier over every class seen so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeClassifier {
    /// Sorted by class id.
    prototypes: Vec<Prototype>,
}

impl PrototypeClassifier {
    pub fn new(prototypes: Vec<Prototype>) -> Result<Self> {
        PrototypeClassifier::default().expand(prototypes)
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.prototypes.iter().map(|p| p.class_id).collect()
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.prototypes.first().map(Prototype::dim)
    }

    /// New classifier covering the old classes plus `new_prototypes`; the
    /// existing prototypes are carried over untouched.
    pub fn expand(&self, new_prototypes: Vec<Prototype>) -> Result<Self> {
        let mut ids: BTreeSet<u32> = self.prototypes.iter().map(|p| p.class_id).collect();
        let dim = self.dim().or_else(|| new_prototypes.first().map(Prototype::dim));
        for p in &new_prototypes {
            if !ids.insert(p.class_id) {
                return Err(Error::DuplicateClass(p.class_id));
            }
            if Some(p.dim()) != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim.unwrap_or(0),
                    found: p.dim(),
                });
            }
            if norm(&p.vector) == 0.0 {
                return Err(Error::ZeroVector);
            }
        }
        let mut prototypes = self.prototypes.clone();
        prototypes.extend(new_prototypes);
        prototypes.sort_by_key(|p| p.class_id);
        Ok(PrototypeClassifier { prototypes })
    }

    /// Predicted class and per-class cosine scores (in class-id order).
    /// Ties go to the lowest class id.
    pub fn classify(&self, embedding: &[f64]) -> Result<(u32, Vec<f64>)> {
        if self.prototypes.is_empty() {
            return Err(Error::Empty("classifier"));
        }
        let scores = self
            .prototypes
            .iter()
            .map(|p| cosine(embedding, &p.vector))
            .collect::<Result<Vec<f64>>>()?;
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        Ok((self.prototypes[best].class_id, scores))
    }

    pub fn to_table(&self) -> PrototypeTable {
        PrototypeTable {
            class_ids: self.class_ids(),
            support_counts: self.prototypes.iter().map(|p| p.support_count as u32).collect(),
            dim: self.dim().unwrap_or(0),
            values: self.prototypes.iter().flat_map(|p| p.vector.iter().copied()).collect(),
        }
    }

    pub fn from_table(table: &PrototypeTable) -> Result<Self> {
        let protos = table
            .class_ids
            .iter()
            .enumerate()
            .map(|(i, &c)| Prototype {
                class_id: c,
                vector: table.values[i * table.dim..(i + 1) * table.dim].to_vec(),
                support_count: table.support_counts[i] as usize,
            })
            .collect();
        PrototypeClassifier::new(protos)
    }
}

/// Flat numeric table: a small header (magic, rows, dim, class ids, support
/// counts) followed by `rows x dim` little-endian `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub class_ids: Vec<u32>,
    pub support_counts: Vec<u32>,
    pub dim: usize,
    pub values: Vec<f64>,
}

const TABLE_MAGIC: &[u8; 8] = b"FSCILTAB";
const TABLE_VERSION: u32 = 1;

impl PrototypeTable {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&TABLE_VERSION.to_le_bytes())?;
        w.write_all(&(self.class_ids.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for c in &self.class_ids {
            w.write_all(&c.to_le_bytes())?;
        }
        for c in &self.support_counts {
            w.write_all(&c.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("prototype table: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != TABLE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = next_u32(&mut r)?;
        if version != TABLE_VERSION {
            return Err(Error::VersionMismatch(format!("prototype table version {version}")));
        }
        let rows = next_u32(&mut r)? as usize;
        let dim = next_u32(&mut r)? as usize;
        let class_ids = (0..rows).map(|_| next_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let support_counts = (0..rows).map(|_| next_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(rows * dim);
        let mut f = [0u8; 8];
        for _ in 0..rows * dim {
            r.read_exact(&mut f).map_err(|_| bad("truncated values"))?;
            values.push(f64::from_le_bytes(f));
        }
        Ok(PrototypeTable {
            class_ids,
            support_counts,
            dim,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
