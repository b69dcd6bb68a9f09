//! Deterministic synthetic image dataset: every class is a fixed set of
//! line strokes, and samples render those strokes under random affine jitter
//! with pixel noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, LabeledSample};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Scales rotation, scaling, translation and stroke wobble together.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            train_per_class: 60,
            test_per_class: 100,
            image_size: 16,
            noise: 0.1,
            jitter: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Stroke {
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
}

fn class_template(seed: u64, class: usize) -> Vec<Stroke> {
    let mut rng = rng_for(seed, "synthetic-class", class as u64);
    let n = rng.random_range(2..=3);
    (0..n)
        .map(|_| {
            let mut p = || -> (f64, f64) { (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)) };
            let (a, mut b) = (p(), p());
            // Keep strokes long enough to be visible.
            while (a.0 - b.0).hypot(a.1 - b.1) < 0.3 {
                b = p();
            }
            Stroke {
                a,
                b,
                width: rng.random_range(0.07..0.11),
            }
        })
        .collect()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn render<R: Rng>(strokes: &[Stroke], cfg: &SyntheticConfig, rng: &mut R) -> Image {
    let j = cfg.jitter;
    let angle = rng.random_range(-0.3..=0.3) * j;
    let scale = 1.0 + rng.random_range(-0.12..=0.12) * j;
    let shift = (rng.random_range(-0.08..=0.08) * j, rng.random_range(-0.08..=0.08) * j);
    let intensity = rng.random_range(0.7..=1.0);
    let wobble = Normal::new(0.0, 0.03 * j + 1e-12).expect("finite");
    let (sin, cos) = f64::sin_cos(angle);
    let mut place = |p: (f64, f64)| {
        let (x, y) = (p.0 - 0.5 + wobble.sample(rng), p.1 - 0.5 + wobble.sample(rng));
        (
            0.5 + scale * (cos * x - sin * y) + shift.0,
            0.5 + scale * (sin * x + cos * y) + shift.1,
        )
    };
    let placed: Vec<Stroke> = strokes
        .iter()
        .map(|s| Stroke {
            a: place(s.a),
            b: place(s.b),
            width: s.width * scale,
        })
        .collect();

    let n = cfg.image_size;
    let pixel = 1.0 / n as f64;
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("finite");
    let mut img = Image::zeros(n, n, 1);
    for y in 0..n {
        for x in 0..n {
            let p = ((x as f64 + 0.5) * pixel, (y as f64 + 0.5) * pixel);
            let mut v: f64 = 0.0;
            for s in &placed {
                let d = segment_distance(p, s.a, s.b);
                v = v.max((1.0 - (d - 0.5 * s.width) / pixel).clamp(0.0, 1.0));
            }
            let v = v * intensity + noise.sample(rng);
            img.set(y, x, 0, v.clamp(0.0, 1.0) as f32);
        }
    }
    img
}

/// Generates the train and test splits; identical for identical configs.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.train_per_class == 0 {
        return Err(Error::Config("synthetic dataset needs classes and train samples".into()));
    }
    if cfg.image_size < 4 {
        return Err(Error::Config("synthetic image size must be at least 4".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.jitter >= 0.0) {
        return Err(Error::Config("synthetic noise and jitter must be non-negative".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..cfg.classes {
        let strokes = class_template(cfg.seed, c);
        for (split, count, out) in [
            ("train", cfg.train_per_class, &mut train),
            ("test", cfg.test_per_class, &mut test),
        ] {
            let mut rng = rng_for(cfg.seed, &format!("synthetic-{split}"), c as u64);
            for i in 0..count {
                out.push(LabeledSample {
                    image: render(&strokes, cfg, &mut rng),
                    label: c as u32,
                    sample_id: format!("syn-{split}-c{c:03}-{i:04}"),
                });
            }
        }
    }
    Ok(Dataset::new(train, test))
}
