mod common;

use std::collections::BTreeSet;

use fscil_core::augment::{apply_pseudo_transform, pseudo_label, rotate90, HardTransform, PseudoClassScheme};
use fscil_core::geometry::{assign_etf_prototypes, make_etf_frame, Prototype, PrototypeClassifier};
use fscil_core::losses::{selfsup_contrastive_loss, supcon_loss, EmbeddingBatch};
use fscil_core::metrics::{class_separation, evaluate_predictions, inter_class_distance};
use fscil_core::nn::{Layer, Network, Sequential};
use fscil_core::protocol::{build_task_stream, ClassOrder, StreamParams};
use fscil_core::rng::rng_for;
use fscil_core::subnet::{apply_mask_forward, extract_subnet_mask, MaskSearchConfig, ScoreMode, SubnetMask};
use fscil_core::{Image, Tensor};
use proptest::prelude::*;
use rand::Rng;

use common::*;

fn stream_params() -> impl Strategy<Value = (usize, StreamParams, u64)> {
    (2usize..12, any::<u64>(), any::<bool>()).prop_flat_map(|(classes, seed, shuffled)| {
        (1..classes).prop_flat_map(move |base| {
            (1..=classes - base).prop_flat_map(move |ways| {
                (1..=(classes - base) / ways, 1usize..=3).prop_map(move |(n_sessions, shots)| {
                    let params = StreamParams {
                        base_classes: base,
                        ways,
                        shots,
                        n_sessions,
                        class_order: if shuffled { ClassOrder::Shuffled } else { ClassOrder::Sorted },
                    };
                    (classes, params, seed)
                })
            })
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn streams_keep_sessions_disjoint_and_shots_exact((classes, params, seed) in stream_params()) {
        let ds = tiny_dataset(&mut rng_for(seed, "dataset", 0), classes, (3, 6), (1, 3));
        let stream = build_task_stream(&ds, &params, seed).unwrap();
        let mut seen = BTreeSet::new();
        let mut last = 0;
        for (t, spec) in stream.sessions().iter().enumerate() {
            for c in &spec.class_ids {
                prop_assert!(seen.insert(*c), "class {} repeated", c);
            }
            if t > 0 {
                let train = stream.train_set(t).unwrap();
                for c in &spec.class_ids {
                    prop_assert_eq!(train.iter().filter(|s| s.label == *c).count(), params.shots);
                }
                prop_assert_eq!(train.len(), params.ways * params.shots);
            }
            let size = stream.cumulative_test_set(t).unwrap().len();
            prop_assert!(size >= last);
            last = size;
        }
    }

    #[test]
    fn stream_is_a_pure_function_of_its_inputs((classes, params, seed) in stream_params()) {
        let ds = tiny_dataset(&mut rng_for(seed, "dataset", 0), classes, (3, 6), (1, 3));
        let a = build_task_stream(&ds, &params, seed).unwrap();
        let b = build_task_stream(&ds, &params, seed).unwrap();
        prop_assert_eq!(a.sessions(), b.sessions());
        for t in 0..a.len() {
            let ids = |s: &fscil_core::TaskStream| -> Vec<String> {
                s.train_set(t).unwrap().iter().map(|x| x.sample_id.clone()).collect()
            };
            prop_assert_eq!(ids(&a), ids(&b));
        }
    }

    #[test]
    fn classify_ignores_positive_rescaling(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = rng_for(seed, "classify", 0);
        let d = rng.random_range(2..10);
        let protos: Vec<Prototype> = gaussian_rows(&mut rng, 6, d)
            .into_iter()
            .enumerate()
            .map(|(i, v)| Prototype { class_id: i as u32 * 3, vector: v, support_count: 1 })
            .collect();
        let clf = PrototypeClassifier::new(protos).unwrap();
        let z = gaussian_rows(&mut rng, 1, d).remove(0);
        let zs: Vec<f64> = z.iter().map(|v| v * scale).collect();
        prop_assert_eq!(clf.classify(&z).unwrap().0, clf.classify(&zs).unwrap().0);
    }

    #[test]
    fn expanding_keeps_existing_scores_bit_identical(seed in any::<u64>()) {
        let mut rng = rng_for(seed, "expand", 0);
        let d = rng.random_range(2..10);
        let mk = |rows: Vec<Vec<f64>>, offset: u32| -> Vec<Prototype> {
            rows.into_iter()
                .enumerate()
                .map(|(i, v)| Prototype { class_id: offset + i as u32, vector: v, support_count: 1 })
                .collect()
        };
        let old = PrototypeClassifier::new(mk(gaussian_rows(&mut rng, 6, d), 0)).unwrap();
        let new = old.expand(mk(gaussian_rows(&mut rng, 3, d), 6)).unwrap();
        let z = gaussian_rows(&mut rng, 1, d).remove(0);
        let before = old.classify(&z).unwrap().1;
        let after = new.classify(&z).unwrap().1;
        for (a, b) in before.iter().zip(&after) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        let (pred, _) = new.classify(&z).unwrap();
        if pred < 6 {
            prop_assert_eq!(pred, old.classify(&z).unwrap().0);
        }
    }

    #[test]
    fn permuted_frame_rows_are_assigned_back(seed in any::<u64>(), k in 2usize..8) {
        let mut rng = rng_for(seed, "perm", 0);
        let frame = make_etf_frame(k, k + 2, seed).unwrap();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let learned: Vec<Prototype> = perm
            .iter()
            .enumerate()
            .map(|(c, &r)| Prototype { class_id: c as u32, vector: frame.row(r).to_vec(), support_count: 1 })
            .collect();
        let a = assign_etf_prototypes(&frame, &learned).unwrap();
        for (c, &r) in perm.iter().enumerate() {
            prop_assert_eq!(a.row_for(c as u32), Some(r));
        }
    }

    #[test]
    fn supcon_ignores_row_order(seed in any::<u64>()) {
        let mut rng = rng_for(seed, "supcon-perm", 0);
        let (n, d) = (rng.random_range(2..=8), rng.random_range(2..=16));
        let z = unit_rows(&mut rng, n, d);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let zp: Vec<Vec<f64>> = perm.iter().map(|&i| z[i].clone()).collect();
        let lp: Vec<u32> = perm.iter().map(|&i| labels[i]).collect();
        let a = supcon_loss(&EmbeddingBatch::new(d, flatten(&z), labels).unwrap(), 0.3).unwrap().value;
        let b = supcon_loss(&EmbeddingBatch::new(d, flatten(&zp), lp).unwrap(), 0.3).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn contrastive_losses_ignore_a_common_rotation(seed in any::<u64>()) {
        let mut rng = rng_for(seed, "rotation-inv", 0);
        let (b, d) = (rng.random_range(1..=4), rng.random_range(2..=16));
        let q = random_orthogonal(&mut rng, d);
        let z = unit_rows(&mut rng, 2 * b, d);
        let zr: Vec<Vec<f64>> = z.iter().map(|r| apply(&q, r)).collect();
        let labels: Vec<u32> = (0..2 * b).map(|i| (i % 3) as u32).collect();
        let batch = |rows: &[Vec<f64>]| {
            EmbeddingBatch::unchecked(d, flatten(rows), labels.clone())
                .unwrap()
                .with_pairing(EmbeddingBatch::stacked_pairing(b))
                .unwrap()
        };
        let sc = |rows: &[Vec<f64>]| supcon_loss(&batch(rows), 0.5).unwrap().value;
        let ss = |rows: &[Vec<f64>]| selfsup_contrastive_loss(&batch(rows), 0.5).unwrap().value;
        prop_assert!((sc(&z) - sc(&zr)).abs() <= 1e-10);
        prop_assert!((ss(&z) - ss(&zr)).abs() <= 1e-10);
    }

    /// Unit rows keep every logit in `[-1/t, 1/t]`, so each log-softmax term
    /// sits within `2/t` of `-ln(n-1)`.
    #[test]
    fn contrastive_losses_approach_the_uniform_limit_as_one_over_tau(seed in any::<u64>()) {
        let mut rng = rng_for(seed, "flatten", 0);
        let (b, d) = (rng.random_range(2..=4), rng.random_range(2..=8));
        let labels: Vec<u32> = (0..2 * b).map(|i| (i % 2) as u32).collect();
        let x = EmbeddingBatch::new(d, flatten(&unit_rows(&mut rng, 2 * b, d)), labels)
            .unwrap()
            .with_pairing(EmbeddingBatch::stacked_pairing(b))
            .unwrap();
        let uniform = ((2 * b - 1) as f64).ln();
        for tau in [0.5, 1.0, 10.0, 100.0, 1000.0, 1e6] {
            let bound = 2.0 / tau + 1e-12;
            let sc = supcon_loss(&x, tau).unwrap().value;
            let ss = selfsup_contrastive_loss(&x, tau).unwrap().value;
            prop_assert!((sc - uniform).abs() <= bound, "supcon {sc} at tau {tau}");
            prop_assert!((ss - uniform).abs() <= bound, "selfsup {ss} at tau {tau}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = rng_for(seed, "fd", 0);
        let (b, d) = (rng.random_range(1..=4), rng.random_range(2..=16));
        let labels: Vec<u32> = (0..2 * b).map(|_| rng.random_range(0..2)).collect();
        let x = flatten(&unit_rows(&mut rng, 2 * b, d));
        let batch = |v: &[f64]| {
            EmbeddingBatch::unchecked(d, v.to_vec(), labels.clone())
                .unwrap()
                .with_pairing(EmbeddingBatch::stacked_pairing(b))
                .unwrap()
        };
        let an = supcon_loss(&batch(&x), 0.4).unwrap().grad;
        let num = numeric_grad(|v| supcon_loss(&batch(v), 0.4).unwrap().value, &x, 1e-5);
        prop_assert!(max_rel_error(&an, &num) <= 1e-4);
        let an = selfsup_contrastive_loss(&batch(&x), 0.4).unwrap().grad;
        let num = numeric_grad(|v| selfsup_contrastive_loss(&batch(v), 0.4).unwrap().value, &x, 1e-5);
        prop_assert!(max_rel_error(&an, &num) <= 1e-4);
    }

    #[test]
    fn pseudo_labels_are_a_bijection(c0 in 1usize..30, factor in 1usize..5) {
        let scheme = PseudoClassScheme {
            factor,
            base_classes: c0,
            transforms: vec![HardTransform::Rotate180; factor - 1],
        };
        let mut labels = BTreeSet::new();
        for c in 0..c0 {
            for m in 0..factor {
                prop_assert!(labels.insert(pseudo_label(&scheme, c, m).unwrap()));
            }
        }
        prop_assert_eq!(labels.len(), scheme.label_space());
        prop_assert_eq!(labels.into_iter().max(), Some(c0 * factor - 1));
    }

    #[test]
    fn rotations_compose_like_z4(a in 0usize..4, b in 0usize..4, n in 1usize..6) {
        let data = (0..n * n * 2).map(|i| i as f32).collect();
        let img = Image::new(n, n, 2, data).unwrap();
        let twice = rotate90(&rotate90(&img, a).unwrap(), b).unwrap();
        prop_assert_eq!(twice, rotate90(&img, (a + b) % 4).unwrap());
    }

    #[test]
    fn inter_distance_is_symmetric_and_scale_blind(seed in any::<u64>(), s in 1e-3f64..1e3) {
        let mut rng = rng_for(seed, "inter", 0);
        let d = rng.random_range(2..10);
        let v = gaussian_rows(&mut rng, 2, d);
        let a = inter_class_distance(&v[0], &v[1]).unwrap();
        prop_assert_eq!(a, inter_class_distance(&v[1], &v[0]).unwrap());
        prop_assert!((0.0..=2.0).contains(&a));
        let scaled: Vec<f64> = v[0].iter().map(|x| x * s).collect();
        prop_assert!(inter_class_distance(&v[0], &scaled).unwrap().abs() < 1e-12);
    }

    #[test]
    fn separation_ignores_rotation_and_scale(seed in any::<u64>(), s in 1e-2f64..1e2) {
        let mut rng = rng_for(seed, "sep", 0);
        let d = rng.random_range(2..8);
        let q = random_orthogonal(&mut rng, d);
        let n = rng.random_range(4..30);
        let z = gaussian_rows(&mut rng, n, d);
        let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
        let base = class_separation(&z, &labels).unwrap();
        let rotated: Vec<Vec<f64>> = z.iter().map(|r| apply(&q, r)).collect();
        let scaled: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|x| x * s).collect()).collect();
        prop_assert!((class_separation(&rotated, &labels).unwrap() - base).abs() < 1e-10);
        prop_assert!((class_separation(&scaled, &labels).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn total_accuracy_is_confusion_trace_share(seed in any::<u64>()) {
        let mut rng = rng_for(seed, "acc", 0);
        let classes: Vec<u32> = (0..rng.random_range(1..8)).collect();
        let n = rng.random_range(1..100);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes.len() as u32)).collect();
        let preds: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes.len() as u32)).collect();
        let r = evaluate_predictions(1, &classes, &labels, &preds, &classes[..1]).unwrap();
        let trace: u64 = (0..classes.len()).map(|i| r.confusion[i][i]).sum();
        prop_assert_eq!(r.total_accuracy, trace as f64 / r.test_count() as f64);
        for (i, c) in classes.iter().enumerate() {
            let count = labels.iter().filter(|y| *y == c).count() as u64;
            prop_assert_eq!(r.confusion[i].iter().sum::<u64>(), count);
        }
    }
}

fn toy_net(seed: u64) -> Sequential {
    let layers = vec![
        Layer::Linear { name: "a".into(), in_features: 5, out_features: 7, bias: true },
        Layer::Relu,
        Layer::Linear { name: "b".into(), in_features: 7, out_features: 3, bias: false },
    ];
    Sequential::new(layers, &mut rng_for(seed, "toy-net", 0))
}

fn squared_objective(out: &Tensor, _labels: &[usize]) -> fscil_core::Result<(f64, Tensor)> {
    let v: f64 = out.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / out.rows() as f64;
    let g = out.data().iter().map(|x| 2.0 * x / out.rows() as f32).collect();
    Ok((v, Tensor::from_vec(out.shape(), g)?))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn all_ones_mask_forward_is_bitwise_unmasked(seed in any::<u64>()) {
        let net = toy_net(seed);
        let mut rng = rng_for(seed, "x", 0);
        let x = Tensor::from_vec(&[4, 5], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let masked = apply_mask_forward(&net, &SubnetMask::all_ones(net.params()), &x).unwrap();
        prop_assert_eq!(masked, net.forward(&x).unwrap());
    }

    #[test]
    fn mask_keeps_the_requested_count_and_is_deterministic(seed in any::<u64>(), f in 0.05f64..1.0, learned in any::<bool>()) {
        let net = toy_net(seed);
        let mut rng = rng_for(seed, "x", 0);
        let x = Tensor::from_vec(&[8, 5], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels = vec![0; 8];
        let cfg = MaskSearchConfig {
            retain_fraction: f,
            steps: 5,
            batch_size: 4,
            mode: if learned { ScoreMode::Learned } else { ScoreMode::Magnitude },
            ..MaskSearchConfig::default()
        };
        let a = extract_subnet_mask(&net, &x, &labels, &squared_objective, &cfg, seed).unwrap();
        let b = extract_subnet_mask(&net, &x, &labels, &squared_objective, &cfg, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let total = a.len();
        let expected = if f == 1.0 { total } else { ((f * total as f64).round() as usize).max(1) };
        prop_assert_eq!(a.ones(), expected);
    }
}

#[test]
fn pseudo_transform_is_an_involution_on_images() {
    let scheme = PseudoClassScheme::doubling(6);
    let img = Image::new(4, 4, 1, (0..16).map(|v| v as f32).collect()).unwrap();
    let once = apply_pseudo_transform(&scheme, &img, 1).unwrap();
    assert_ne!(once, img);
    assert_eq!(apply_pseudo_transform(&scheme, &once, 1).unwrap(), img);
    assert_eq!(apply_pseudo_transform(&scheme, &img, 0).unwrap(), img);
}
