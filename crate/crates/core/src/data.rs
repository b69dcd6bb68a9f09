//! Images, labeled samples and dataset ingestion.
//!
//! Two on-disk layouts are understood:
//!
//! * a manifest: line-delimited JSON, one `{"path", "label", "split"}` record
//!   per sample, paths relative to the manifest's directory;
//! * class folders: `<root>/<split>/<class>/<image>` where class directories
//!   are numbered in sorted name order.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H x W x C` image with values in `[0, 1]`, stored row-major (HWC).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: height * width * channels,
                found: data.len(),
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub image: Image,
    pub label: u32,
    pub sample_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Train and test pools of a labeled image collection.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Arc<LabeledSample>>,
    pub test: Vec<Arc<LabeledSample>>,
}

impl Dataset {
    pub fn new(train: Vec<LabeledSample>, test: Vec<LabeledSample>) -> Self {
        Dataset {
            train: train.into_iter().map(Arc::new).collect(),
            test: test.into_iter().map(Arc::new).collect(),
        }
    }

    /// Distinct class ids present in the training pool, ascending.
    pub fn class_ids(&self) -> Vec<u32> {
        self.train
            .iter()
            .map(|s| s.label)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn sample_shape(&self) -> Option<(usize, usize, usize)> {
        self.train
            .first()
            .map(|s| (s.image.height, s.image.width, s.image.channels))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: u32,
    pub split: Split,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads an image file as `channels` (1 = luma, 3 = RGB) floats in `[0, 1]`.
pub fn load_image(path: &Path, channels: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        c => return Err(Error::Data(format!("unsupported channel count {c}"))),
    };
    Image::new(h, w, channels, data)
}

pub fn load_manifest_dataset(manifest: &Path, channels: usize) -> Result<Dataset> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for rec in read_manifest(manifest)? {
        let image = load_image(&root.join(&rec.path), channels)?;
        let sample = LabeledSample {
            image,
            label: rec.label,
            sample_id: rec.path.clone(),
        };
        match rec.split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    check_uniform(&train, &test)?;
    Ok(Dataset::new(train, test))
}

/// Reads `<root>/train/<class>/*` and `<root>/test/<class>/*`. Class ids are
/// the positions of the class directory names in sorted order of the train
/// split.
pub fn load_folder_dataset(root: &Path, channels: usize) -> Result<Dataset> {
    let class_dirs = sorted_entries(&root.join("train"))?;
    let names: Vec<String> = class_dirs
        .iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (split, out) in [("train", &mut train), ("test", &mut test)] {
        for (label, name) in names.iter().enumerate() {
            let dir = root.join(split).join(name);
            if !dir.exists() {
                continue;
            }
            for file in sorted_entries(&dir)? {
                if !file.is_file() {
                    continue;
                }
                let image = load_image(&file, channels)?;
                let rel = file.strip_prefix(root).unwrap_or(&file);
                out.push(LabeledSample {
                    image,
                    label: label as u32,
                    sample_id: rel.to_string_lossy().into_owned(),
                });
            }
        }
    }
    check_uniform(&train, &test)?;
    Ok(Dataset::new(train, test))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn check_uniform(train: &[LabeledSample], test: &[LabeledSample]) -> Result<()> {
    let mut shapes = train
        .iter()
        .chain(test)
        .map(|s| (s.image.height, s.image.width, s.image.channels));
    if let Some(first) = shapes.next() {
        if let Some(other) = shapes.find(|s| *s != first) {
            return Err(Error::Data(format!(
                "images must share one shape: {first:?} vs {other:?}"
            )));
        }
    }
    let mut seen = BTreeSet::new();
    for s in train.iter().chain(test) {
        if !seen.insert(s.sample_id.as_str()) {
            return Err(Error::Data(format!("duplicate sample id `{}`", s.sample_id)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_loading() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for (i, split) in [Split::Train, Split::Train, Split::Test].into_iter().enumerate() {
            let name = format!("img{i}.png");
            let img = image::GrayImage::from_fn(4, 4, |x, y| image::Luma([(x * 16 + y * 60 + i as u32) as u8]));
            img.save(dir.path().join(&name)).unwrap();
            records.push(ManifestRecord { path: name, label: i as u32 % 2, split });
        }
        let manifest = dir.path().join("manifest.jsonl");
        write_manifest(&manifest, &records).unwrap();
        assert_eq!(read_manifest(&manifest).unwrap(), records);

        let ds = load_manifest_dataset(&manifest, 1).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.class_ids(), vec![0, 1]);
        let px = ds.train[0].image.get(1, 2, 0);
        assert!((px - (2.0 * 16.0 + 60.0) / 255.0).abs() < 1e-6);
    }

    #[test]
    fn folder_layout_assigns_sorted_class_ids() {
        let dir = tempfile::tempdir().unwrap();
        for split in ["train", "test"] {
            for class in ["zebra", "ant"] {
                let d = dir.path().join(split).join(class);
                fs::create_dir_all(&d).unwrap();
                image::RgbImage::new(3, 3).save(d.join("a.png")).unwrap();
            }
        }
        let ds = load_folder_dataset(dir.path(), 3).unwrap();
        let ant = ds.train.iter().find(|s| s.sample_id.contains("ant")).unwrap();
        assert_eq!(ant.label, 0);
        assert_eq!(ds.test.len(), 2);
        assert_eq!(ds.sample_shape(), Some((3, 3, 3)));
    }

    #[test]
    fn malformed_manifest_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "{\"path\":\"a\",\"label\":0,\"split\":\"train\"}\nnot json\n").unwrap();
        let err = read_manifest(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
