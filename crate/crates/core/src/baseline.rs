//! Standalone incremental-frozen baseline: cross-entropy base training, then
//! a frozen encoder and one mean-embedding prototype per class.
//!
//! Written straight through without the pipeline's trick switches so it can
//! serve as an independent reference for the all-off configuration.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::augment::augment_view;
use crate::config::ExperimentConfig;
use crate::data::{Dataset, Image, LabeledSample};
use crate::error::{Error, Result};
use crate::geometry::{compute_prototype, Prototype, PrototypeClassifier};
use crate::losses::cross_entropy;
use crate::metrics::{evaluate_session, Embedder, SessionResult};
use crate::model::{images_to_tensor, EncoderModel};
use crate::nn::{cosine_lr, Network, Sgd};
use crate::protocol::build_task_stream;
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::train::LinearHead;

fn prototypes_of(encoder: &EncoderModel, samples: &[&LabeledSample]) -> Result<Vec<Prototype>> {
    let emb = encoder.embed(samples)?;
    let mut by_class: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for (s, z) in samples.iter().zip(emb) {
        by_class.entry(s.label).or_default().push(z);
    }
    by_class.iter().map(|(&c, zs)| compute_prototype(c, zs)).collect()
}

/// Per-session results of the frozen baseline under `config`'s data, stream,
/// encoder, base schedule and seed. Trick toggles are ignored.
pub fn run_frozen_baseline(config: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<SessionResult>> {
    let stream = build_task_stream(dataset, &config.stream, config.seed)?;
    let base = stream.train_set(0)?;
    let base_ids = stream.base_classes().to_vec();
    let class_index: BTreeMap<u32, usize> = base_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let d = config.encoder.embedding_dim;
    let n_classes = base_ids.len();

    let mut encoder = EncoderModel::new(config.encoder.clone(), config.seed)?;
    let mut head = LinearHead::new("ce_head", d, n_classes, config.optimizer, &mut rng_for(config.seed, "head-init", 0));
    let mut opt = Sgd::new(config.optimizer, encoder.params());
    let weight = config.losses.base.weights.cross_entropy;
    let sched = config.base;
    let total = sched.epochs * base.len().div_ceil(sched.batch_size);
    let mut step = 0;

    for epoch in 0..sched.epochs {
        let mut rng = rng_for(config.seed, "base-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(sched.batch_size) {
            let views: Vec<Image> = idx.iter().map(|&i| augment_view(&base[i].image, &config.augment, &mut rng)).collect();
            let refs: Vec<&Image> = views.iter().collect();
            let x = images_to_tensor(&refs)?;
            let (out, trace) = encoder.net.forward_with(encoder.net.params(), &x)?;
            let z: Vec<f64> = out.data().iter().map(|v| *v as f64).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| class_index[&base[i].label]).collect();
            let loss = cross_entropy(&head.logits(&z), n_classes, &targets)?;
            if !loss.value.is_finite() {
                return Err(Error::Divergence { stage: "base".into(), epoch });
            }
            let (gz, head_grads) = head.backward(&z, &loss.grad, weight)?;
            let g = Tensor::from_vec(out.shape(), gz.iter().map(|v| (weight * v) as f32).collect())?;
            let grads = encoder.net.backward_with(encoder.net.params(), &trace, &g)?;
            let lr = cosine_lr(sched.lr, step, total);
            opt.step(encoder.net.params_mut(), &grads, lr, None);
            head.step(&head_grads, lr);
            step += 1;
        }
    }

    let base_refs: Vec<&LabeledSample> = base.iter().map(|s| s.as_ref()).collect();
    let mut classifier = PrototypeClassifier::new(prototypes_of(&encoder, &base_refs)?)?;
    let mut results = Vec::with_capacity(stream.len());
    for t in 0..stream.len() {
        if t > 0 {
            let train = stream.train_set(t)?;
            let refs: Vec<&LabeledSample> = train.iter().map(|s| s.as_ref()).collect();
            classifier = classifier.expand(prototypes_of(&encoder, &refs)?)?;
        }
        let test = stream.cumulative_test_set(t)?;
        let refs: Vec<&LabeledSample> = test.iter().map(|s| s.as_ref()).collect();
        results.push(evaluate_session(t, &classifier, &encoder, &refs, &base_ids)?.0);
    }
    Ok(results)
}
