//! Direct-summation reference implementations and helpers shared by the
//! integration suites. Nothing here reuses the library's numeric kernels.

#![allow(dead_code)]

use fscil_core::data::{Dataset, Image, LabeledSample};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    gaussian_rows(rng, n, d)
        .into_iter()
        .map(|r| {
            let n = dot(&r, &r).sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn rows_of(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}

/// `sum_i -1/|P(i)| sum_{p in P(i)} log(exp(z_i.z_p/t) / sum_{k != i} exp(z_i.z_k/t))`
/// averaged over anchors with at least one positive.
pub fn supcon_direct(z: &[Vec<f64>], labels: &[u32], tau: f64) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (dot(&z[i], &z[k]) / tau).exp()).sum();
        let mut s = 0.0;
        for &p in &pos {
            s += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += -s / pos.len() as f64;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// `-(1/2b) sum_i log(exp(z_i.z_k(i)/t) / sum_{k != i} exp(z_i.z_k/t))`.
pub fn selfsup_direct(z: &[Vec<f64>], pairing: &[usize], tau: f64) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (dot(&z[i], &z[k]) / tau).exp()).sum();
        total += ((dot(&z[i], &z[pairing[i]]) / tau).exp() / denom).ln();
    }
    -total / n as f64
}

/// `(1/C) sum_c |P_c - w_c|^2`.
pub fn etf_direct(learned: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (w, p) in learned.iter().zip(targets) {
        for (a, b) in w.iter().zip(p) {
            total += (b - a) * (b - a);
        }
    }
    total / learned.len() as f64
}

/// Mean `-log softmax(logits)[y]` with a plain softmax.
pub fn cross_entropy_direct(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[y].exp() / denom).ln();
    }
    total / labels.len() as f64
}

fn group(embeddings: &[Vec<f64>], labels: &[u32]) -> Vec<Vec<Vec<f64>>> {
    let mut ids: Vec<u32> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.iter()
        .map(|c| {
            embeddings
                .iter()
                .zip(labels)
                .filter(|(_, y)| *y == c)
                .map(|(z, _)| z.clone())
                .collect()
        })
        .collect()
}

fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v / rows.len() as f64;
        }
    }
    m
}

pub fn inter_brute(w_i: &[f64], w_j: &[f64]) -> f64 {
    1.0 - cos(w_i, w_j)
}

pub fn intra_brute(samples: &[Vec<f64>], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for z in samples {
        s += cos(z, w);
    }
    1.0 - s / samples.len() as f64
}

/// Per-class prototypes (class means) in ascending class order.
pub fn prototypes_brute(embeddings: &[Vec<f64>], labels: &[u32]) -> Vec<Vec<f64>> {
    group(embeddings, labels).iter().map(|g| mean(g)).collect()
}

/// Triple sum over classes and same-class sample pairs.
pub fn d_within_brute(embeddings: &[Vec<f64>], labels: &[u32]) -> f64 {
    let groups = group(embeddings, labels);
    let c = groups.len() as f64;
    let mut total = 0.0;
    for g in &groups {
        let n = g.len() as f64;
        for zi in g {
            for zj in g {
                total += (1.0 - cos(zi, zj)) / (c * n * n);
            }
        }
    }
    total
}

/// Quadruple sum over class pairs and their sample pairs.
pub fn d_total_brute(embeddings: &[Vec<f64>], labels: &[u32]) -> f64 {
    let groups = group(embeddings, labels);
    let c = groups.len() as f64;
    let mut total = 0.0;
    for gc in &groups {
        for gd in &groups {
            let (nc, nd) = (gc.len() as f64, gd.len() as f64);
            for zi in gc {
                for zj in gd {
                    total += (1.0 - cos(zi, zj)) / (c * c * nc * nd);
                }
            }
        }
    }
    total
}

pub fn separation_brute(embeddings: &[Vec<f64>], labels: &[u32]) -> f64 {
    1.0 - d_within_brute(embeddings, labels) / d_total_brute(embeddings, labels)
}

/// Best total cosine over every injective map of `learned` into `frame`
/// rows, with the winning rows.
pub fn best_assignment_brute(frame: &[Vec<f64>], learned: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn go(
        i: usize,
        frame: &[Vec<f64>],
        learned: &[Vec<f64>],
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if i == learned.len() {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for r in 0..frame.len() {
            if used[r] {
                continue;
            }
            used[r] = true;
            cur.push(r);
            go(i + 1, frame, learned, used, cur, acc + cos(&learned[i], &frame[r]), best);
            cur.pop();
            used[r] = false;
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(0, frame, learned, &mut vec![false; frame.len()], &mut Vec::new(), 0.0, &mut best);
    best
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + h;
            let up = f(&x);
            x[i] = v - h;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest element-wise relative error, with differences below `1e-6` in
/// magnitude measured absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// A dataset of 1x1 images where every sample id is unique.
pub fn tiny_dataset(rng: &mut impl Rng, classes: usize, train_range: (usize, usize), test_range: (usize, usize)) -> Dataset {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        for (split, range, out) in [("train", train_range, &mut train), ("test", test_range, &mut test)] {
            let n = rng.random_range(range.0..=range.1);
            for i in 0..n {
                out.push(LabeledSample {
                    image: Image::new(1, 1, 1, vec![c as f32 / classes as f32]).unwrap(),
                    label: c as u32,
                    sample_id: format!("{split}-{c}-{i}"),
                });
            }
        }
    }
    Dataset::new(train, test)
}

/// A Haar-ish random orthogonal matrix by Gram-Schmidt on Gaussian rows.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v = gaussian_rows(rng, 1, d).remove(0);
        for u in &q {
            let p = dot(&v, u);
            for (a, b) in v.iter_mut().zip(u) {
                *a -= p * b;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            q.push(v.iter().map(|x| x / n).collect());
        }
    }
    q
}

pub fn apply(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}
