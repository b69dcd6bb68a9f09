//! Image transforms: light stochastic views for contrastive learning, hard
//! semantic-shifting transforms for pseudo-classes, and the four rotations of
//! the rotation pretext task.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Rotates a square image by `quarter_turns * 90` degrees counter-clockwise.
pub fn rotate90(image: &Image, quarter_turns: usize) -> Result<Image> {
    if !image.is_square() {
        return Err(Error::NonSquareImage {
            height: image.height,
            width: image.width,
        });
    }
    let q = quarter_turns % 4;
    if q == 0 {
        return Ok(image.clone());
    }
    let n = image.height;
    let mut out = Image::zeros(n, n, image.channels);
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = match q {
                1 => (x, n - 1 - y),
                2 => (n - 1 - y, n - 1 - x),
                _ => (n - 1 - x, y),
            };
            for c in 0..image.channels {
                out.set(y, x, c, image.get(sy, sx, c));
            }
        }
    }
    Ok(out)
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..image.channels {
                out.set(y, x, c, image.get(y, image.width - 1 - x, c));
            }
        }
    }
    out
}

pub fn flip_vertical(image: &Image) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..image.channels {
                out.set(y, x, c, image.get(image.height - 1 - y, x, c));
            }
        }
    }
    out
}

/// Deterministic transforms used to spawn pseudo-classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardTransform {
    Rotate90,
    Rotate180,
    Rotate270,
    FlipVertical,
    FlipHorizontal,
}

impl HardTransform {
    pub fn apply(self, image: &Image) -> Result<Image> {
        match self {
            HardTransform::Rotate90 => rotate90(image, 1),
            HardTransform::Rotate180 => rotate90(image, 2),
            HardTransform::Rotate270 => rotate90(image, 3),
            HardTransform::FlipVertical => Ok(flip_vertical(image)),
            HardTransform::FlipHorizontal => Ok(flip_horizontal(image)),
        }
    }
}

/// Label-space multiplication by `factor` through `factor - 1` hard
/// transforms; transform index 0 is the identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoClassScheme {
    pub factor: usize,
    pub base_classes: usize,
    pub transforms: Vec<HardTransform>,
}

impl PseudoClassScheme {
    /// `factor = 2` with a 180 degree rotation.
    pub fn doubling(base_classes: usize) -> Self {
        PseudoClassScheme {
            factor: 2,
            base_classes,
            transforms: vec![HardTransform::Rotate180],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::Config("pseudo-class factor must be at least 1".into()));
        }
        if self.transforms.len() != self.factor - 1 {
            return Err(Error::Config(format!(
                "pseudo-class factor {} needs {} transforms, got {}",
                self.factor,
                self.factor - 1,
                self.transforms.len()
            )));
        }
        Ok(())
    }

    /// Size of the training label space, `C0 * M`.
    pub fn label_space(&self) -> usize {
        self.base_classes * self.factor
    }

    fn check_m(&self, m: usize) -> Result<()> {
        if m >= self.factor {
            return Err(Error::IndexOutOfRange {
                index: m,
                limit: self.factor,
            });
        }
        Ok(())
    }
}

/// Label of class `class_id` (a base-class index) under transform `m`:
/// `C0 * m + class_id`.
pub fn pseudo_label(scheme: &PseudoClassScheme, class_id: usize, m: usize) -> Result<usize> {
    if class_id >= scheme.base_classes {
        return Err(Error::IndexOutOfRange {
            index: class_id,
            limit: scheme.base_classes,
        });
    }
    scheme.check_m(m)?;
    Ok(scheme.base_classes * m + class_id)
}

pub fn apply_pseudo_transform(scheme: &PseudoClassScheme, image: &Image, m: usize) -> Result<Image> {
    scheme.check_m(m)?;
    if m == 0 {
        return Ok(image.clone());
    }
    let t = scheme
        .transforms
        .get(m - 1)
        .ok_or(Error::IndexOutOfRange {
            index: m,
            limit: scheme.transforms.len() + 1,
        })?;
    t.apply(image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationChoice {
    Index(usize),
    Random,
}

/// Rotated copy of `image` and its rotation label in `0..4`.
pub fn make_rotation_example<R: Rng + ?Sized>(
    image: &Image,
    choice: RotationChoice,
    rng: &mut R,
) -> Result<(Image, usize)> {
    let k = match choice {
        RotationChoice::Index(k) if k < 4 => k,
        RotationChoice::Index(k) => return Err(Error::IndexOutOfRange { index: k, limit: 4 }),
        RotationChoice::Random => rng.random_range(0..4),
    };
    Ok((rotate90(image, k)?, k))
}

/// Strengths of the light view augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Smallest crop side as a fraction of the image side.
    pub crop_min: f32,
    pub flip_prob: f32,
    /// Additive brightness shift drawn from `[-brightness, brightness]`.
    pub brightness: f32,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_min: 0.75,
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            crop_min: 1.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

/// Parameters of one square crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// Draws a square crop. Consumes exactly three values from `rng`.
pub fn sample_crop<R: Rng + ?Sized>(rng: &mut R, side: usize, crop_min: f32) -> CropParams {
    let min = ((crop_min.clamp(0.0, 1.0) * side as f32).round() as usize).clamp(1, side);
    let size = rng.random_range(min..=side);
    let top = rng.random_range(0..=side - size);
    let left = rng.random_range(0..=side - size);
    CropParams { top, left, size }
}

/// Bilinear crop-and-resize back to the full image size.
pub fn crop_resize(image: &Image, crop: CropParams) -> Image {
    let (h, w) = (image.height, image.width);
    if crop.size == h && crop.size == w && crop.top == 0 && crop.left == 0 {
        return image.clone();
    }
    let mut out = Image::zeros(h, w, image.channels);
    let scale = |n: usize| {
        if n > 1 {
            (crop.size - 1) as f32 / (n - 1) as f32
        } else {
            0.0
        }
    };
    let (sy_scale, sx_scale) = (scale(h), scale(w));
    for y in 0..h {
        let fy = crop.top as f32 + y as f32 * sy_scale;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let wy = fy - y0 as f32;
        for x in 0..w {
            let fx = crop.left as f32 + x as f32 * sx_scale;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let wx = fx - x0 as f32;
            for c in 0..image.channels {
                let v = (1.0 - wy) * ((1.0 - wx) * image.get(y0, x0, c) + wx * image.get(y0, x1, c))
                    + wy * ((1.0 - wx) * image.get(y1, x0, c) + wx * image.get(y1, x1, c));
                out.set(y, x, c, v);
            }
        }
    }
    out
}

/// One stochastic light view: crop-resize, horizontal flip, then brightness
/// and contrast jitter. Disabled components consume no randomness.
pub fn augment_view<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let mut out = if cfg.crop_min < 1.0 && image.is_square() {
        let crop = sample_crop(rng, image.height, cfg.crop_min);
        crop_resize(image, crop)
    } else {
        image.clone()
    };
    if cfg.flip_prob > 0.0 && rng.random::<f32>() < cfg.flip_prob {
        out = flip_horizontal(&out);
    }
    if cfg.brightness > 0.0 {
        let b = rng.random_range(-cfg.brightness..=cfg.brightness);
        out.data.iter_mut().for_each(|v| *v = (*v + b).clamp(0.0, 1.0));
    }
    if cfg.contrast > 0.0 {
        let f = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
        let mean = out.data.iter().sum::<f32>() / out.data.len() as f32;
        out.data
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
    }
    out
}

/// Two independent light views of `image`, reproducible from `seed`.
pub fn make_contrastive_views(image: &Image, cfg: &AugmentConfig, seed: u64) -> (Image, Image) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "views", 0));
    let a = augment_view(image, cfg, &mut rng);
    let b = augment_view(image, cfg, &mut rng);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pattern(n: usize, channels: usize) -> Image {
        let data = (0..n * n * channels).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        Image::new(n, n, channels, data).unwrap()
    }

    #[test]
    fn pseudo_labels_double_the_label_space() {
        let s = PseudoClassScheme::doubling(60);
        assert_eq!(pseudo_label(&s, 5, 0).unwrap(), 5);
        assert_eq!(pseudo_label(&s, 5, 1).unwrap(), 65);
        assert_eq!(s.label_space(), 120);
        assert!(pseudo_label(&s, 60, 0).is_err());
        assert!(pseudo_label(&s, 0, 2).is_err());
    }

    #[test]
    fn pseudo_labels_are_a_bijection() {
        let s = PseudoClassScheme {
            factor: 3,
            base_classes: 10,
            transforms: vec![HardTransform::Rotate90, HardTransform::Rotate180],
        };
        s.validate().unwrap();
        let mut seen = vec![false; 30];
        for c in 0..10 {
            for m in 0..3 {
                let l = pseudo_label(&s, c, m).unwrap();
                assert!(!seen[l]);
                seen[l] = true;
            }
        }
        assert!(seen.iter().all(|v| *v));
    }

    #[test]
    fn pseudo_transform_semantics() {
        let s = PseudoClassScheme::doubling(4);
        let img = pattern(5, 2);
        assert_eq!(apply_pseudo_transform(&s, &img, 0).unwrap(), img);
        let once = apply_pseudo_transform(&s, &img, 1).unwrap();
        assert_eq!(apply_pseudo_transform(&s, &once, 1).unwrap(), img);
        for y in 0..5 {
            for x in 0..5 {
                for c in 0..2 {
                    assert_eq!(once.get(y, x, c), img.get(4 - y, 4 - x, c));
                }
            }
        }
        assert!(apply_pseudo_transform(&s, &img, 2).is_err());
    }

    #[test]
    fn rotations_move_a_corner_marker() {
        let mut img = Image::zeros(4, 4, 1);
        img.set(0, 0, 0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let expected = [(0, 0), (3, 0), (3, 3), (0, 3)];
        for (k, &(y, x)) in expected.iter().enumerate() {
            let (r, label) = make_rotation_example(&img, RotationChoice::Index(k), &mut rng).unwrap();
            assert_eq!(label, k);
            assert_eq!(r.get(y, x, 0), 1.0, "rotation {k}");
            assert_eq!(r.data.iter().sum::<f32>(), 1.0);
        }
        let non_square = Image::zeros(2, 3, 1);
        assert!(matches!(
            make_rotation_example(&non_square, RotationChoice::Index(1), &mut rng),
            Err(Error::NonSquareImage { .. })
        ));
    }

    #[test]
    fn rotations_compose_like_z4() {
        let img = pattern(6, 3);
        for a in 0..4 {
            for b in 0..4 {
                let ab = rotate90(&rotate90(&img, a).unwrap(), b).unwrap();
                assert_eq!(ab, rotate90(&img, (a + b) % 4).unwrap());
            }
        }
    }

    #[test]
    fn identity_views_and_determinism() {
        let img = pattern(8, 1);
        let (a, b) = make_contrastive_views(&img, &AugmentConfig::identity(), 3);
        assert_eq!(a, img);
        assert_eq!(b, img);
        let cfg = AugmentConfig::default();
        assert_eq!(make_contrastive_views(&img, &cfg, 9), make_contrastive_views(&img, &cfg, 9));
        assert_ne!(make_contrastive_views(&img, &cfg, 9), make_contrastive_views(&img, &cfg, 10));
    }

    #[test]
    fn crop_matches_seeded_replay() {
        let img = pattern(10, 1);
        let cfg = AugmentConfig { crop_min: 0.5, flip_prob: 0.0, brightness: 0.0, contrast: 0.0 };
        let (a, b) = make_contrastive_views(&img, &cfg, 42);
        let mut replay = ChaCha8Rng::seed_from_u64(derive_seed(42, "views", 0));
        let ca = sample_crop(&mut replay, 10, 0.5);
        let cb = sample_crop(&mut replay, 10, 0.5);
        assert!(ca.size >= 5 && ca.top + ca.size <= 10 && ca.left + ca.size <= 10);
        assert_eq!(a, crop_resize(&img, ca));
        assert_eq!(b, crop_resize(&img, cb));
    }
}
