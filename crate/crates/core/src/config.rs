//! Experiment configuration: TOML file, `key=value` overrides, validation and
//! a stable content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentConfig, HardTransform, PseudoClassScheme};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights, DEFAULT_TEMPERATURE};
use crate::nn::{EncoderSpec, SgdConfig};
use crate::protocol::{ClassOrder, StreamParams};
use crate::subnet::MaskSearchConfig;
use crate::synthetic::{generate_dataset, SyntheticConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// `root/{train,test}/<class>/<image>`.
    Folder { root: PathBuf, channels: usize },
    /// JSON-lines records of `{path, label, split}`.
    Manifest { path: PathBuf, channels: usize },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(cfg) => generate_dataset(cfg),
            DataSource::Folder { root, channels } => data::load_folder_dataset(root, *channels),
            DataSource::Manifest { path, channels } => data::load_manifest_dataset(path, *channels),
        }
    }
}

/// Which tricks participate. Each flag is independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrickToggles {
    pub supcon: bool,
    pub etf: bool,
    pub pseudo: bool,
    pub subnet_tuning: bool,
    pub pretraining: bool,
    pub rotation: bool,
}

impl Default for TrickToggles {
    fn default() -> Self {
        TrickToggles::all_on()
    }
}

impl TrickToggles {
    pub fn all_on() -> Self {
        TrickToggles {
            supcon: true,
            etf: true,
            pseudo: true,
            subnet_tuning: true,
            pretraining: true,
            rotation: true,
        }
    }

    pub fn all_off() -> Self {
        TrickToggles {
            supcon: false,
            etf: false,
            pseudo: false,
            subnet_tuning: false,
            pretraining: false,
            rotation: false,
        }
    }

    /// Grouped toggles: stability (SupCon, ETF, pseudo-classes),
    /// adaptability (subnet tuning) and training (pre-training, rotation).
    pub fn from_groups(stability: bool, adaptability: bool, training: bool) -> Self {
        TrickToggles {
            supcon: stability,
            etf: stability,
            pseudo: stability,
            subnet_tuning: adaptability,
            pretraining: training,
            rotation: training,
        }
    }

    pub fn set(&mut self, name: &str, value: bool) -> Result<()> {
        let slot = match name {
            "supcon" => &mut self.supcon,
            "etf" => &mut self.etf,
            "pseudo" => &mut self.pseudo,
            "subnet_tuning" => &mut self.subnet_tuning,
            "pretraining" => &mut self.pretraining,
            "rotation" => &mut self.rotation,
            other => return Err(Error::Config(format!("unknown trick toggle `{other}`"))),
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            epochs: 50,
            lr: 0.05,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IncrementalSchedule {
    pub epochs_per_session: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Layer prefixes kept frozen during tuning; empty means every block but
    /// the last.
    pub frozen_layer_prefixes: Vec<String>,
    /// Scale applied to cosine logits against the prototype classifier.
    pub logit_scale: f64,
}

impl Default for IncrementalSchedule {
    fn default() -> Self {
        IncrementalSchedule {
            epochs_per_session: 10,
            lr: 0.0005,
            batch_size: 64,
            frozen_layer_prefixes: Vec::new(),
            logit_scale: 16.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageLosses {
    pub pretrain: LossConfig,
    /// Cross-entropy stands in for SupCon when that toggle is off.
    pub base: LossConfig,
    /// Cross-entropy here is against the prototype classifier.
    pub incremental: LossConfig,
}

impl Default for StageLosses {
    fn default() -> Self {
        StageLosses {
            pretrain: LossConfig::pretrain_default(),
            base: LossConfig {
                temperature: DEFAULT_TEMPERATURE,
                weights: LossWeights {
                    cross_entropy: 1.0,
                    ..LossConfig::base_default().weights
                },
            },
            incremental: LossConfig {
                temperature: DEFAULT_TEMPERATURE,
                weights: LossWeights {
                    supcon: 1.0,
                    cross_entropy: 1.0,
                    ..LossWeights::default()
                },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub factor: usize,
    pub transforms: Vec<HardTransform>,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            factor: 2,
            transforms: vec![HardTransform::Rotate180],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EtfConfig {
    /// ETF alignment starts at epoch `ceil(epoch_factor * epochs)`.
    pub epoch_factor: f64,
}

impl Default for EtfConfig {
    fn default() -> Self {
        EtfConfig { epoch_factor: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Split whose embeddings feed the geometry reports.
    pub geometry_split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            geometry_split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub stream: StreamParams,
    pub encoder: EncoderSpec,
    pub tricks: TrickToggles,
    pub optimizer: SgdConfig,
    pub pretrain: StageSchedule,
    pub base: StageSchedule,
    pub incremental: IncrementalSchedule,
    pub losses: StageLosses,
    pub augment: AugmentConfig,
    /// Views for self-supervised pre-training.
    pub pretrain_augment: AugmentConfig,
    pub pseudo: PseudoConfig,
    pub etf: EtfConfig,
    pub subnet: MaskSearchConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    /// The bundled toy setting: 10 synthetic classes, 6 base classes and two
    /// 2-way 5-shot sessions.
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataSource::default(),
            stream: StreamParams {
                base_classes: 6,
                ways: 2,
                shots: 5,
                n_sessions: 2,
                class_order: ClassOrder::Sorted,
            },
            encoder: EncoderSpec::default(),
            tricks: TrickToggles::all_on(),
            optimizer: SgdConfig::default(),
            pretrain: StageSchedule {
                epochs: 20,
                ..StageSchedule::default()
            },
            base: StageSchedule::default(),
            incremental: IncrementalSchedule::default(),
            losses: StageLosses::default(),
            augment: AugmentConfig::default(),
            pretrain_augment: AugmentConfig {
                crop_min: 0.5,
                brightness: 0.4,
                contrast: 0.4,
                ..AugmentConfig::default()
            },
            pseudo: PseudoConfig::default(),
            etf: EtfConfig::default(),
            subnet: MaskSearchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `dotted.key=value` overrides. Values parse as TOML literals
    /// and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| {
            Error::Config(format!("after overrides: {}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.etf.epoch_factor) {
            return bad(format!("etf.epoch_factor must lie in [0, 1), got {}", self.etf.epoch_factor));
        }
        for (name, s) in [("pretrain", &self.pretrain), ("base", &self.base)] {
            if s.batch_size == 0 {
                return bad(format!("{name}.batch_size must be positive"));
            }
            if !(s.lr >= 0.0 && s.lr.is_finite()) {
                return bad(format!("{name}.lr must be non-negative"));
            }
        }
        if self.incremental.batch_size == 0 || !(self.incremental.lr >= 0.0) {
            return bad("incremental schedule needs a positive batch size and lr >= 0".into());
        }
        if !(self.incremental.logit_scale > 0.0) {
            return bad("incremental.logit_scale must be positive".into());
        }
        if self.stream.base_classes == 0 {
            return bad("stream.base_classes must be positive".into());
        }
        if self.stream.n_sessions > 0 && (self.stream.ways == 0 || self.stream.shots == 0) {
            return bad("incremental sessions need ways and shots".into());
        }
        for (name, l) in [
            ("pretrain", &self.losses.pretrain),
            ("base", &self.losses.base),
            ("incremental", &self.losses.incremental),
        ] {
            l.validate().map_err(|e| Error::Config(format!("losses.{name}: {e}")))?;
        }
        self.pseudo_scheme().validate()?;
        if !(self.subnet.retain_fraction > 0.0 && self.subnet.retain_fraction <= 1.0) {
            return bad("subnet.retain_fraction must lie in (0, 1]".into());
        }
        self.encoder.layers()?;
        if self.tricks.etf {
            let k = self.train_label_space();
            if k > self.encoder.embedding_dim + 1 {
                return bad(format!(
                    "a simplex ETF of {k} vectors does not fit in {} dimensions",
                    self.encoder.embedding_dim
                ));
            }
        }
        Ok(())
    }

    pub fn pseudo_scheme(&self) -> PseudoClassScheme {
        PseudoClassScheme {
            factor: self.pseudo.factor,
            base_classes: self.stream.base_classes,
            transforms: self.pseudo.transforms.clone(),
        }
    }

    /// Size of the base-training label space.
    pub fn train_label_space(&self) -> usize {
        if self.tricks.pseudo {
            self.stream.base_classes * self.pseudo.factor
        } else {
            self.stream.base_classes
        }
    }

    /// Layer prefixes frozen during incremental tuning.
    pub fn frozen_prefixes(&self) -> Vec<String> {
        if self.incremental.frozen_layer_prefixes.is_empty() {
            let blocks = self.encoder.block_names();
            blocks[..blocks.len() - 1].to_vec()
        } else {
            self.incremental.frozen_layer_prefixes.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}` does not name a config field")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) && !table.contains_key("kind") {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    unreachable!("loop returns on the last part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = ExperimentConfig::from_toml_str("[tricks]\nsupcon = true\nwarp_drive = true\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("warp_drive") && msg.contains("line 3"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let cfg = ExperimentConfig::default();
        assert!(matches!(cfg.with_overrides(&["tricks.warp_drive=true"]), Err(Error::Config(_))));
        assert!(matches!(cfg.with_overrides(&["nope=1"]), Err(Error::Config(_))));
        assert!(matches!(cfg.with_overrides(&["seed"]), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["seed=7", "tricks.etf=false", "base.lr=0.5", "etf.epoch_factor=0.75", "data.classes=12"])
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(!cfg.tricks.etf);
        assert_eq!(cfg.base.lr, 0.5);
        assert_eq!(cfg.etf.epoch_factor, 0.75);
        assert!(matches!(cfg.data, DataSource::Synthetic(ref s) if s.classes == 12));
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn validation_guards() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.with_overrides(&["etf.epoch_factor=1.0"]).is_err());
        assert!(cfg.with_overrides(&["base.batch_size=0"]).is_err());
        assert!(cfg.with_overrides(&["subnet.retain_fraction=0.0"]).is_err());
        // 6 base classes times 2 pseudo copies need 12 <= d + 1.
        assert!(cfg.with_overrides(&["encoder.embedding_dim=10"]).is_err());
        assert!(cfg.with_overrides(&["encoder.embedding_dim=10", "tricks.etf=false"]).is_ok());
        assert!(cfg.with_overrides(&["encoder.embedding_dim=11"]).is_ok());
    }

    #[test]
    fn toggles_and_prefixes() {
        let mut t = TrickToggles::all_off();
        t.set("rotation", true).unwrap();
        assert!(t.rotation && !t.supcon);
        assert!(t.set("bogus", true).is_err());
        assert_eq!(TrickToggles::from_groups(true, true, true), TrickToggles::all_on());
        assert_eq!(TrickToggles::from_groups(false, false, false), TrickToggles::all_off());
        assert_eq!(ExperimentConfig::default().frozen_prefixes(), vec!["block1", "block2", "block3"]);
        assert_eq!(ExperimentConfig::default().train_label_space(), 12);
    }
}
