//! The three training stages and the run driver.
//!
//! Pre-training (self-supervised contrastive loss on base images) and base
//! training (SupCon or cross-entropy, ETF alignment, pseudo-classes, rotation
//! prediction) shape the encoder; each incremental session then optionally
//! fine-tunes the encoder outside its subnetwork mask, adds prototypes for
//! the new classes, and evaluates on every class seen so far.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_pseudo_transform, augment_view, make_rotation_example, pseudo_label, RotationChoice};
use crate::config::{ExperimentConfig, TrickToggles};
use crate::data::{Dataset, Image, LabeledSample, Split};
use crate::error::{Error, Result};
use crate::geometry::{assign_etf_prototypes, compute_prototype, make_etf_frame, EtfAssignment, EtfFrame, Prototype, PrototypeClassifier};
use crate::losses::{
    composite_loss, cross_entropy, etf_alignment_loss, rotation_loss, selfsup_contrastive_loss, supcon_loss,
    EmbeddingBatch, LossConfig, LossKind, LossOutput, LossWeights, ROTATIONS,
};
use crate::metrics::{evaluate_session, geometry_report, GeometryReport, SessionResult};
use crate::model::{images_to_tensor, EncoderModel};
use crate::nn::{cosine_lr, Network, ParamSet, Sgd};
use crate::protocol::{build_task_stream, RealizedSplit, TaskStream};
use crate::record::{ExperimentRecord, WallClock};
use crate::rng::{derive_seed, rng_for};
use crate::subnet::{extract_subnet_mask, incremental_tune, subnet_gap, SubnetMask, TuningPolicy};
use crate::tensor::Tensor;
use crate::train::{backward_rows, forward_images, normalize_backward, normalize_rows, prototype_cross_entropy, LinearHead};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Base,
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    StageStarted { stage: Stage, session: usize },
    Epoch { stage: Stage, session: usize, epoch: usize, loss: f64 },
    EtfAssigned { epoch: usize, classes: usize, alignment: f64 },
    MaskExtracted { retain_fraction: f64, kept: usize, total: usize, gap: f64 },
    SessionTuned { session: usize, steps: usize, tunable_parameters: usize, final_loss: Option<f64> },
    SessionEvaluated { session: usize, total_accuracy: f64 },
}

/// Everything needed to continue a run after the last finished session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub version: u32,
    pub config_hash: String,
    pub stage: Stage,
    pub session_index: usize,
    pub encoder: EncoderModel,
    pub classifier: PrototypeClassifier,
    pub mask: Option<SubnetMask>,
    pub results: Vec<SessionResult>,
    pub geometry: Vec<GeometryReport>,
    pub events: Vec<Event>,
}

impl RunState {
    pub fn new(config: &ExperimentConfig, encoder: EncoderModel) -> Self {
        RunState {
            version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            stage: Stage::Pretrain,
            session_index: 0,
            encoder,
            classifier: PrototypeClassifier::default(),
            mask: None,
            results: Vec::new(),
            geometry: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Moves forward only: pretrain, base (session 0), then sessions 1, 2, ...
    pub fn advance(&mut self, stage: Stage, session: usize) -> Result<()> {
        let ok = match (self.stage, stage) {
            (Stage::Pretrain, Stage::Base) => session == 0,
            (Stage::Base, Stage::Incremental) => session == 1,
            (Stage::Incremental, Stage::Incremental) => session == self.session_index + 1,
            _ => false,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "cannot move from {:?} session {} to {stage:?} session {session}",
                self.stage, self.session_index
            )));
        }
        self.stage = stage;
        self.session_index = session;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(Error::VersionMismatch(format!(
                    "checkpoint {} has version {other:?}, expected {CHECKPOINT_VERSION}",
                    path.display()
                )))
            }
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Refuses checkpoints written under a different configuration.
    pub fn check_config(&self, config: &ExperimentConfig) -> Result<()> {
        let hash = config.hash();
        if self.config_hash != hash {
            return Err(Error::VersionMismatch(format!(
                "checkpoint was written for config {} but the current config is {hash}",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.results.last().map(|r| r.total_accuracy)
    }
}

fn images_of(samples: &[Arc<LabeledSample>]) -> Vec<Image> {
    samples.iter().map(|s| s.image.clone()).collect()
}

fn embed_all(encoder: &EncoderModel, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&Image> = images.iter().collect();
    encoder.embed_images(&refs)
}

/// Per-class mean embeddings, ordered by class id.
fn class_prototypes(embeddings: &[Vec<f64>], labels: &[u32]) -> Result<Vec<Prototype>> {
    let mut groups: BTreeMap<u32, Vec<&Vec<f64>>> = BTreeMap::new();
    for (z, &y) in embeddings.iter().zip(labels) {
        groups.entry(y).or_default().push(z);
    }
    groups.iter().map(|(&c, zs)| compute_prototype(c, zs)).collect()
}

fn check_finite(value: f64, stage: &str, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: stage.into(),
            epoch,
        })
    }
}

/// Places a gradient over `rows` starting at row `offset` into a zero
/// gradient over `total_rows`.
fn pad_rows(grad: &[f64], offset: usize, total_rows: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; total_rows * d];
    out[offset * d..offset * d + grad.len()].copy_from_slice(grad);
    out
}

fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Self-supervised contrastive pre-training on base-session images; labels
/// are ignored. With the toggle off the encoder passes through unchanged.
pub fn run_pretraining(config: &ExperimentConfig, stream: &TaskStream, mut encoder: EncoderModel) -> Result<(EncoderModel, Vec<Event>)> {
    let mut events = Vec::new();
    let sched = config.pretrain;
    if !config.tricks.pretraining || sched.epochs == 0 {
        return Ok((encoder, events));
    }
    events.push(Event::StageStarted { stage: Stage::Pretrain, session: 0 });
    let base = stream.train_set(0)?;
    let d = encoder.spec.embedding_dim;
    let tau = config.losses.pretrain.temperature;
    let weight = config.losses.pretrain.weights.selfsup;
    let mut opt = Sgd::new(config.optimizer, encoder.params());
    let steps_per_epoch = base.len().div_ceil(sched.batch_size);
    let total = sched.epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 0..sched.epochs {
        let mut rng = rng_for(config.seed, "pretrain-epoch", epoch as u64);
        let order = shuffled(base.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(sched.batch_size) {
            let mut images = Vec::with_capacity(2 * idx.len());
            for _ in 0..2 {
                for &i in idx {
                    images.push(augment_view(&base[i].image, &config.pretrain_augment, &mut rng));
                }
            }
            let (z, zt, trace) = forward_images(&encoder.net, &images)?;
            let (u, norms) = normalize_rows(&z, d)?;
            let labels = (0..images.len() as u32).collect();
            let batch = EmbeddingBatch::unchecked(d, u.clone(), labels)?.with_pairing(EmbeddingBatch::stacked_pairing(idx.len()))?;
            let out = selfsup_contrastive_loss(&batch, tau)?;
            check_finite(out.value, "pretrain", epoch)?;
            let gz: Vec<f64> = normalize_backward(&u, &norms, &out.grad, d).iter().map(|g| weight * g).collect();
            let grads = backward_rows(&encoder.net, &trace, &zt, &gz)?;
            opt.step(encoder.net.params_mut(), &grads, cosine_lr(sched.lr, step, total), None);
            step += 1;
            epoch_loss += weight * out.value;
        }
        events.push(Event::Epoch {
            stage: Stage::Pretrain,
            session: 0,
            epoch,
            loss: epoch_loss / steps_per_epoch as f64,
        });
    }
    Ok((encoder, events))
}

/// Loss weights after applying the trick toggles to the base configuration.
pub fn effective_base_weights(config: &ExperimentConfig, etf_active: bool) -> LossWeights {
    let w = config.losses.base.weights;
    let t = config.tricks;
    LossWeights {
        supcon: if t.supcon { w.supcon } else { 0.0 },
        cross_entropy: if t.supcon { 0.0 } else { w.cross_entropy },
        etf: if t.etf && etf_active { w.etf } else { 0.0 },
        rotation: if t.rotation { w.rotation } else { 0.0 },
        selfsup: 0.0,
    }
}

/// Epoch at which the ETF frame is assigned, if it falls inside training.
pub fn etf_activation_epoch(epoch_factor: f64, epochs: usize) -> Option<usize> {
    let e = (epoch_factor * epochs as f64).ceil() as usize;
    (e < epochs).then_some(e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseOutcome {
    pub encoder: EncoderModel,
    pub classifier: PrototypeClassifier,
    /// Real-class prototypes, by class id.
    pub prototypes: Vec<Prototype>,
    /// Labels used during training (pseudo-classes included).
    pub train_label_space: usize,
    pub etf: Option<(EtfFrame, EtfAssignment)>,
    pub events: Vec<Event>,
}

struct BaseContext<'a> {
    config: &'a ExperimentConfig,
    base: &'a [Arc<LabeledSample>],
    /// Position of each base class id in `0..C0`.
    position: BTreeMap<u32, usize>,
}

impl BaseContext<'_> {
    /// Unaugmented copies of every base image, with pseudo-class copies when
    /// enabled, and their training labels.
    fn full_label_set(&self) -> Result<(Vec<Image>, Vec<u32>)> {
        let scheme = self.config.pseudo_scheme();
        let factor = if self.config.tricks.pseudo { scheme.factor } else { 1 };
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for m in 0..factor {
            for s in self.base {
                let pos = self.position[&s.label];
                images.push(if m == 0 { s.image.clone() } else { apply_pseudo_transform(&scheme, &s.image, m)? });
                labels.push(if m == 0 { pos } else { pseudo_label(&scheme, pos, m)? } as u32);
            }
        }
        Ok((images, labels))
    }

    /// Builds the rows of one base mini-batch: classification rows (views of
    /// real and pseudo-class copies) followed by rotation rows.
    fn batch(&self, idx: &[usize], rng: &mut impl Rng) -> Result<(Vec<Image>, Vec<u32>, Vec<usize>)> {
        let cfg = self.config;
        let scheme = cfg.pseudo_scheme();
        let factor = if cfg.tricks.pseudo { scheme.factor } else { 1 };
        let views = if cfg.tricks.supcon { 2 } else { 1 };
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut first_views = Vec::new();
        for m in 0..factor {
            let sources: Vec<Image> = idx
                .iter()
                .map(|&i| {
                    let img = &self.base[i].image;
                    if m == 0 {
                        Ok(img.clone())
                    } else {
                        apply_pseudo_transform(&scheme, img, m)
                    }
                })
                .collect::<Result<_>>()?;
            for v in 0..views {
                for (k, &i) in idx.iter().enumerate() {
                    let view = augment_view(&sources[k], &cfg.augment, rng);
                    if m == 0 && v == 0 {
                        first_views.push(view.clone());
                    }
                    images.push(view);
                    let pos = self.position[&self.base[i].label];
                    labels.push(if m == 0 { pos } else { pseudo_label(&scheme, pos, m)? } as u32);
                }
            }
        }
        let mut rot_labels = Vec::new();
        if cfg.tricks.rotation {
            for view in &first_views {
                let (img, r) = make_rotation_example(view, RotationChoice::Random, rng)?;
                images.push(img);
                rot_labels.push(r);
            }
        }
        Ok((images, labels, rot_labels))
    }
}

/// Mean unit embedding of each class present in the batch.
fn batch_prototypes(u: &[f64], labels: &[u32], d: usize) -> (Vec<Prototype>, BTreeMap<u32, Vec<usize>>) {
    let mut rows: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        rows.entry(y).or_default().push(i);
    }
    let protos = rows
        .iter()
        .map(|(&c, members)| {
            let mut v = vec![0.0; d];
            for &i in members {
                for t in 0..d {
                    v[t] += u[i * d + t];
                }
            }
            v.iter_mut().for_each(|x| *x /= members.len() as f64);
            Prototype {
                class_id: c,
                vector: v,
                support_count: members.len(),
            }
        })
        .collect();
    (protos, rows)
}

/// Base training with the enabled tricks, then real-class prototypes from
/// the unaugmented base training set.
pub fn run_base_session(config: &ExperimentConfig, stream: &TaskStream, mut encoder: EncoderModel) -> Result<BaseOutcome> {
    let base = stream.train_set(0)?;
    let base_ids = stream.base_classes().to_vec();
    let ctx = BaseContext {
        config,
        base,
        position: base_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
    };
    let d = encoder.spec.embedding_dim;
    let label_space = config.train_label_space();
    let tricks = config.tricks;
    if tricks.etf && label_space > d + 1 {
        return Err(Error::TooManyClasses {
            classes: label_space,
            rows: d + 1,
        });
    }
    let sched = config.base;
    let tau = config.losses.base.temperature;
    let mut events = vec![Event::StageStarted { stage: Stage::Base, session: 0 }];

    let mut ce_head = LinearHead::new("ce_head", d, label_space, config.optimizer, &mut rng_for(config.seed, "head-init", 0));
    let mut rot_head = LinearHead::new("rotation_head", d, ROTATIONS, config.optimizer, &mut rng_for(config.seed, "head-init", 1));
    let mut opt = Sgd::new(config.optimizer, encoder.params());
    let activation = if tricks.etf { etf_activation_epoch(config.etf.epoch_factor, sched.epochs) } else { None };
    let mut etf: Option<(EtfFrame, EtfAssignment)> = None;

    let steps_per_epoch = base.len().div_ceil(sched.batch_size);
    let total = sched.epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 0..sched.epochs {
        if activation == Some(epoch) {
            let frame = make_etf_frame(label_space, d, derive_seed(config.seed, "etf-frame", 0))?;
            let (images, labels) = ctx.full_label_set()?;
            let emb = embed_all(&encoder, &images)?;
            let learned = class_prototypes(&emb, &labels)?
                .iter()
                .map(Prototype::normalized)
                .collect::<Result<Vec<_>>>()?;
            let assignment = assign_etf_prototypes(&frame, &learned)?;
            events.push(Event::EtfAssigned {
                epoch,
                classes: learned.len(),
                alignment: assignment.total_alignment(&frame, &learned)?,
            });
            etf = Some((frame, assignment));
        }
        let weights = effective_base_weights(config, etf.is_some());
        let loss_cfg = LossConfig { temperature: tau, weights };
        let mut rng = rng_for(config.seed, "base-epoch", epoch as u64);
        let order = shuffled(base.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(sched.batch_size) {
            let (images, labels, rot_labels) = ctx.batch(idx, &mut rng)?;
            let (z, zt, trace) = forward_images(&encoder.net, &images)?;
            let rows = images.len();
            let ncls = labels.len();
            let zc = &z[..ncls * d];
            let mut parts: BTreeMap<LossKind, LossOutput> = BTreeMap::new();
            let mut head_grads: Vec<(bool, ParamSet)> = Vec::new();

            if weights.supcon > 0.0 || weights.etf > 0.0 {
                let (u, norms) = normalize_rows(zc, d)?;
                if weights.supcon > 0.0 {
                    let batch = EmbeddingBatch::unchecked(d, u.clone(), labels.clone())?;
                    let out = supcon_loss(&batch, tau)?;
                    let gz = normalize_backward(&u, &norms, &out.grad, d);
                    parts.insert(LossKind::Supcon, LossOutput { value: out.value, grad: pad_rows(&gz, 0, rows, d) });
                }
                if let (true, Some((frame, assignment))) = (weights.etf > 0.0, &etf) {
                    let (protos, members) = batch_prototypes(&u, &labels, d);
                    let out = etf_alignment_loss(&protos, frame, assignment)?;
                    let mut gu = vec![0.0; u.len()];
                    for (p, (_, rows_of)) in members.iter().enumerate() {
                        let scale = 1.0 / rows_of.len() as f64;
                        for &i in rows_of {
                            for t in 0..d {
                                gu[i * d + t] = out.grad[p * d + t] * scale;
                            }
                        }
                    }
                    let gz = normalize_backward(&u, &norms, &gu, d);
                    parts.insert(LossKind::Etf, LossOutput { value: out.value, grad: pad_rows(&gz, 0, rows, d) });
                }
            }
            if weights.cross_entropy > 0.0 {
                let targets: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
                let out = cross_entropy(&ce_head.logits(zc), label_space, &targets)?;
                let (gz, hg) = ce_head.backward(zc, &out.grad, weights.cross_entropy)?;
                head_grads.push((false, hg));
                parts.insert(LossKind::CrossEntropy, LossOutput { value: out.value, grad: pad_rows(&gz, 0, rows, d) });
            }
            if weights.rotation > 0.0 {
                let zr = &z[ncls * d..];
                let out = rotation_loss(&rot_head.logits(zr), &rot_labels)?;
                let (gz, hg) = rot_head.backward(zr, &out.grad, weights.rotation)?;
                head_grads.push((true, hg));
                parts.insert(LossKind::Rotation, LossOutput { value: out.value, grad: pad_rows(&gz, ncls, rows, d) });
            }
            let total_loss = composite_loss(&parts, &loss_cfg)?;
            check_finite(total_loss.value, "base", epoch)?;
            let grads = backward_rows(&encoder.net, &trace, &zt, &total_loss.grad)?;
            let lr = cosine_lr(sched.lr, step, total);
            opt.step(encoder.net.params_mut(), &grads, lr, None);
            for (rotation, hg) in &head_grads {
                if *rotation {
                    rot_head.step(hg, lr);
                } else {
                    ce_head.step(hg, lr);
                }
            }
            step += 1;
            epoch_loss += total_loss.value;
        }
        events.push(Event::Epoch {
            stage: Stage::Base,
            session: 0,
            epoch,
            loss: epoch_loss / steps_per_epoch as f64,
        });
    }

    let emb = embed_all(&encoder, &images_of(base))?;
    let labels: Vec<u32> = base.iter().map(|s| s.label).collect();
    let prototypes = class_prototypes(&emb, &labels)?;
    let classifier = PrototypeClassifier::new(prototypes.clone())?;
    Ok(BaseOutcome {
        encoder,
        classifier,
        prototypes,
        train_label_space: label_space,
        etf,
        events,
    })
}

fn unit_vectors(prototypes: &[Prototype]) -> Result<Vec<Vec<f64>>> {
    prototypes.iter().map(|p| p.normalized().map(|p| p.vector)).collect()
}

/// Searches the subnetwork mask on the unaugmented base training set, using
/// cross-entropy against the base prototypes as the objective.
pub fn extract_base_mask(config: &ExperimentConfig, stream: &TaskStream, encoder: &EncoderModel, classifier: &PrototypeClassifier) -> Result<(SubnetMask, f64)> {
    let base = stream.train_set(0)?;
    let refs: Vec<&Image> = base.iter().map(|s| &s.image).collect();
    let x = images_to_tensor(&refs)?;
    let ids = classifier.class_ids();
    let targets: Vec<usize> = base
        .iter()
        .map(|s| ids.binary_search(&s.label).map_err(|_| Error::UncoveredClass(s.label)))
        .collect::<Result<_>>()?;
    let protos = unit_vectors(classifier.prototypes())?;
    let d = encoder.spec.embedding_dim;
    let scale = config.incremental.logit_scale;
    let objective = |out: &Tensor, labels: &[usize]| -> Result<(f64, Tensor)> {
        let z: Vec<f64> = out.data().iter().map(|v| *v as f64).collect();
        let l = prototype_cross_entropy(&z, d, &protos, labels, scale)?;
        Ok((l.value, Tensor::from_vec(out.shape(), l.grad.iter().map(|g| *g as f32).collect())?))
    };
    let mask = extract_subnet_mask(&encoder.net, &x, &targets, &objective, &config.subnet, derive_seed(config.seed, "mask", 0))?;
    let gap = subnet_gap(&encoder.net, &mask, &x, &targets, &objective)?;
    Ok((mask, gap))
}

/// Runs pre-training, base training and mask extraction, and evaluates
/// session 0.
pub fn run_base_stages(config: &ExperimentConfig, stream: &TaskStream) -> Result<RunState> {
    config.validate()?;
    let encoder = EncoderModel::new(config.encoder.clone(), config.seed)?;
    let mut state = RunState::new(config, encoder.clone());
    let (encoder, events) = run_pretraining(config, stream, encoder)?;
    state.events.extend(events);
    let base = run_base_session(config, stream, encoder)?;
    state.events.extend(base.events);
    state.encoder = base.encoder;
    state.classifier = base.classifier;
    if config.tricks.subnet_tuning {
        let (mask, gap) = extract_base_mask(config, stream, &state.encoder, &state.classifier)?;
        state.events.push(Event::MaskExtracted {
            retain_fraction: mask.retain_fraction,
            kept: mask.ones(),
            total: mask.len(),
            gap,
        });
        state.mask = Some(mask);
    }
    state.advance(Stage::Base, 0)?;
    evaluate_into(config, stream, &mut state, 0)?;
    Ok(state)
}

/// Embeds the cumulative test set of session `t`, records the accuracy and
/// the geometry report.
fn evaluate_into(config: &ExperimentConfig, stream: &TaskStream, state: &mut RunState, t: usize) -> Result<()> {
    let test = stream.cumulative_test_set(t)?;
    let refs: Vec<&LabeledSample> = test.iter().map(|s| s.as_ref()).collect();
    let base_ids = stream.base_classes();
    let (result, emb) = evaluate_session(t, &state.classifier, &state.encoder, &refs, base_ids)?;
    let geometry = match config.eval.geometry_split {
        Split::Test => {
            let labels: Vec<u32> = refs.iter().map(|s| s.label).collect();
            geometry_report(t, &emb, &labels, base_ids)?
        }
        Split::Train => {
            let train: Vec<Arc<LabeledSample>> = (0..=t)
                .map(|s| stream.train_set(s).map(|x| x.to_vec()))
                .collect::<Result<Vec<_>>>()?
                .concat();
            let emb = embed_all(&state.encoder, &images_of(&train))?;
            let labels: Vec<u32> = train.iter().map(|s| s.label).collect();
            geometry_report(t, &emb, &labels, base_ids)?
        }
    };
    state.events.push(Event::SessionEvaluated {
        session: t,
        total_accuracy: result.total_accuracy,
    });
    state.results.push(result);
    state.geometry.push(geometry);
    Ok(())
}

pub fn tuning_policy(config: &ExperimentConfig) -> TuningPolicy {
    TuningPolicy {
        frozen_layer_prefixes: config.frozen_prefixes(),
        incremental_lr: config.incremental.lr,
        epochs_per_session: config.incremental.epochs_per_session,
    }
}

/// One incremental session: optional masked tuning, prototypes for the new
/// classes, classifier expansion and evaluation.
pub fn run_incremental_session(config: &ExperimentConfig, stream: &TaskStream, state: &mut RunState, t: usize) -> Result<()> {
    let train = stream.train_set(t)?;
    let seen = state.classifier.class_ids();
    if let Some(s) = train.iter().find(|s| seen.binary_search(&s.label).is_ok()) {
        return Err(Error::DuplicateClass(s.label));
    }
    state.advance(Stage::Incremental, t)?;
    state.events.push(Event::StageStarted { stage: Stage::Incremental, session: t });
    let d = state.encoder.spec.embedding_dim;
    let labels: Vec<u32> = train.iter().map(|s| s.label).collect();

    if config.tricks.subnet_tuning && config.incremental.epochs_per_session > 0 {
        let mask = state
            .mask
            .as_ref()
            .ok_or_else(|| Error::invalid("subnet tuning needs a mask from the base session"))?;
        let novel = class_prototypes(&embed_all(&state.encoder, &images_of(train))?, &labels)?;
        let mut all: Vec<Prototype> = state.classifier.prototypes().to_vec();
        all.extend(novel);
        all.sort_by_key(|p| p.class_id);
        let ids: Vec<u32> = all.iter().map(|p| p.class_id).collect();
        let targets_unit = unit_vectors(&all)?;
        let target_of: Vec<usize> = labels.iter().map(|y| ids.binary_search(y).expect("class present")).collect();
        let inc = &config.losses.incremental;
        let weights = LossWeights {
            supcon: if config.tricks.supcon { inc.weights.supcon } else { 0.0 },
            cross_entropy: inc.weights.cross_entropy,
            ..LossWeights::default()
        };
        let loss_cfg = LossConfig { temperature: inc.temperature, weights };
        let views = if weights.supcon > 0.0 { 2 } else { 1 };
        let scale = config.incremental.logit_scale;
        let mut objective = |net: &crate::nn::Sequential, idx: &[usize], rng: &mut rand_chacha::ChaCha8Rng| -> Result<(f64, ParamSet)> {
            let mut images = Vec::with_capacity(views * idx.len());
            let mut ys = Vec::new();
            let mut tg = Vec::new();
            for _ in 0..views {
                for &i in idx {
                    images.push(augment_view(&train[i].image, &config.augment, rng));
                    ys.push(labels[i]);
                    tg.push(target_of[i]);
                }
            }
            let (z, zt, trace) = forward_images(net, &images)?;
            let mut parts = BTreeMap::new();
            if weights.cross_entropy > 0.0 {
                parts.insert(LossKind::CrossEntropy, prototype_cross_entropy(&z, d, &targets_unit, &tg, scale)?);
            }
            if weights.supcon > 0.0 {
                let (u, norms) = normalize_rows(&z, d)?;
                let out = supcon_loss(&EmbeddingBatch::unchecked(d, u.clone(), ys)?, inc.temperature)?;
                parts.insert(
                    LossKind::Supcon,
                    LossOutput {
                        value: out.value,
                        grad: normalize_backward(&u, &norms, &out.grad, d),
                    },
                );
            }
            let total = composite_loss(&parts, &loss_cfg)?;
            Ok((total.value, backward_rows(net, &trace, &zt, &total.grad)?))
        };
        let report = incremental_tune(
            &mut state.encoder.net,
            mask,
            &tuning_policy(config),
            config.optimizer,
            train.len(),
            config.incremental.batch_size,
            derive_seed(config.seed, "tune", t as u64),
            &mut objective,
        )?;
        state.events.push(Event::SessionTuned {
            session: t,
            steps: report.steps,
            tunable_parameters: report.tunable_parameters,
            final_loss: report.losses.last().copied(),
        });
    }

    let novel = class_prototypes(&embed_all(&state.encoder, &images_of(train))?, &labels)?;
    state.classifier = state.classifier.expand(novel)?;
    evaluate_into(config, stream, state, t)
}

/// Runs every stage in memory.
pub fn run_stream(config: &ExperimentConfig, stream: &TaskStream) -> Result<RunState> {
    let mut state = run_base_stages(config, stream)?;
    for t in 1..stream.len() {
        run_incremental_session(config, stream, &mut state, t)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop (after checkpointing) once this session is finished.
    pub stop_after_session: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: RunState,
    pub completed: bool,
    pub record: Option<ExperimentRecord>,
}

pub fn checkpoint_path(run_dir: &Path, session: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("session-{session:03}.json"))
}

/// The most advanced checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join("checkpoints");
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("session-") && n.ends_with(".json"))
        })
        .collect();
    found.sort();
    Ok(found.pop())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn checkpoint(run_dir: Option<&Path>, state: &RunState) -> Result<()> {
    if let Some(dir) = run_dir {
        state.save(&checkpoint_path(dir, state.session_index))?;
        if let Some(mask) = &state.mask {
            let path = dir.join("checkpoints").join("mask.json");
            fs::write(&path, serde_json::to_vec(mask)?).map_err(|e| Error::io(&path, e))?;
        }
        write_jsonl(&dir.join("log.jsonl"), &state.events)?;
    }
    Ok(())
}

/// Runs (or resumes) an experiment, persisting the run directory when one
/// is given: config snapshot, realised split, per-session checkpoints, the
/// event log, per-session results, geometry reports and the final record.
pub fn run_experiment(config: &ExperimentConfig, dataset: &Dataset, opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let started = now_ms();
    let dir = opts.run_dir.as_deref();
    let split_path = dir.map(|d| d.join("split.json"));
    let stream = match (&split_path, opts.resume) {
        (Some(p), true) if p.exists() => TaskStream::from_split(dataset, &RealizedSplit::load(p)?)?,
        _ => build_task_stream(dataset, &config.stream, config.seed)?,
    };
    if let Some(d) = dir {
        fs::create_dir_all(d.join("checkpoints")).map_err(|e| Error::io(d, e))?;
        let snapshot = d.join("config.toml");
        fs::write(&snapshot, config.to_toml_string()?).map_err(|e| Error::io(&snapshot, e))?;
        let split = split_path.as_ref().expect("run dir");
        if !(opts.resume && split.exists()) {
            stream.realized_split(config.seed).save(split)?;
        }
    }

    let resumed = match (dir, opts.resume) {
        (Some(d), true) => latest_checkpoint(d)?.map(|p| RunState::load(&p)).transpose()?,
        _ => None,
    };
    let mut state = match resumed {
        Some(s) => {
            s.check_config(config)?;
            s
        }
        None => {
            let s = run_base_stages(config, &stream)?;
            checkpoint(dir, &s)?;
            s
        }
    };
    let stop = |s: &RunState| opts.stop_after_session.is_some_and(|k| s.session_index >= k);
    let mut completed = true;
    for t in state.session_index + 1..stream.len() {
        if stop(&state) {
            completed = false;
            break;
        }
        run_incremental_session(config, &stream, &mut state, t)?;
        checkpoint(dir, &state)?;
    }
    completed &= state.session_index + 1 == stream.len();

    let mut record = None;
    if completed {
        let rec = ExperimentRecord::new(
            config,
            state.results.clone(),
            state.geometry.clone(),
            WallClock {
                started_unix_ms: started,
                finished_unix_ms: now_ms(),
            },
        );
        if let Some(d) = dir {
            write_jsonl(&d.join("results.jsonl"), &state.results)?;
            write_jsonl(&d.join("geometry.jsonl"), &state.geometry)?;
            rec.save(&d.join("record.json"))?;
        }
        record = Some(rec);
    }
    Ok(RunOutcome { state, completed, record })
}

/// The eight stability / adaptability / training combinations, all-on first
/// and all-off last.
pub fn ablation_subsets() -> Vec<TrickToggles> {
    let mut out = Vec::with_capacity(8);
    for bits in (0..8u8).rev() {
        out.push(TrickToggles::from_groups(bits & 4 != 0, bits & 2 != 0, bits & 1 != 0));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tricks: TrickToggles,
    pub session_accuracies: Vec<f64>,
    pub final_accuracy: f64,
}

/// One full run per toggle subset on identical data and seed.
pub fn run_ablation_grid(config: &ExperimentConfig, dataset: &Dataset, subsets: &[TrickToggles]) -> Result<Vec<AblationRow>> {
    subsets
        .iter()
        .map(|&tricks| {
            let cfg = ExperimentConfig { tricks, ..config.clone() };
            let stream = build_task_stream(dataset, &cfg.stream, cfg.seed)?;
            let state = run_stream(&cfg, &stream)?;
            let session_accuracies: Vec<f64> = state.results.iter().map(|r| r.total_accuracy).collect();
            Ok(AblationRow {
                tricks,
                final_accuracy: *session_accuracies.last().ok_or(Error::Empty("sessions"))?,
                session_accuracies,
            })
        })
        .collect()
}
