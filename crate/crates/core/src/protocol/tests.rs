use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_dataset, BoundingBox, Instance, RenderParams, TaskSplitConfig};
use crate::numerics::Tensor;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        m: 6,
        levels: 2,
        points: 2,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn: 16,
        backbone_width: 4,
        attention_stage: 1,
    }
}

fn tiny_split() -> TaskSplitConfig {
    TaskSplitConfig {
        images_per_task_train: 8,
        images_test: 4,
        render: RenderParams {
            width: 32,
            height: 32,
            noise: 0.02,
            min_objects: 1,
            max_objects: 3,
            min_size: 8,
            max_size: 14,
        },
        ..TaskSplitConfig::original()
    }
}

struct Fixture {
    split: TaskSplitConfig,
    train: Vec<Vec<LabeledImage>>,
    test: Vec<LabeledImage>,
    bank: ImageBank,
}

fn fixture() -> Fixture {
    let split = tiny_split();
    let ds = generate_dataset(&split).unwrap();
    let bank = ds.bank();
    let train = ds.train.iter().map(|m| m.labeled_images(&bank).unwrap()).collect();
    let test = ds.test.labeled_images(&bank).unwrap();
    Fixture {
        split,
        train,
        test,
        bank,
    }
}

fn fresh(split: &TaskSplitConfig, seed: u64) -> EpisodeState {
    EpisodeState::new(tiny_model(), &split.tasks[0], seed).unwrap()
}

fn mean_loss(state: &EpisodeState, images: &[LabeledImage], loss: &LossConfig) -> f64 {
    let known = state.labels.known().to_vec();
    let total: f64 = images
        .iter()
        .map(|img| {
            let mut tape = Tape::new();
            let p = bind(&state.params, &mut tape, false);
            let out = forward(&mut tape, &p, &state.model, &img.pixels, known.len()).unwrap();
            let il = image_loss(&mut tape, &out, &img.instances, &known, loss).unwrap();
            tape.value(il.total).item()
        })
        .sum();
    total / images.len() as f64
}

#[test]
fn label_space_history_replays_the_split() {
    let split = TaskSplitConfig::super_category();
    let mut ls = LabelSpace::new(&split.tasks[0]).unwrap();
    for t in 1..split.tasks.len() {
        ls.add(&split.tasks[t]).unwrap();
        let want: Vec<u32> = split.tasks[..=t].iter().flatten().copied().collect();
        assert_eq!(ls.known(), want.as_slice());
        assert_eq!(ls.task(), t);
        assert_eq!(ls.width(), 1 + want.len());
    }
    assert_eq!(ls.history(), split.tasks.as_slice());
    assert_eq!(ls.label_of(0), 0);
    assert_eq!(ls.column(split.tasks[2][1]), Some(6));
}

#[test]
fn label_space_rejects_overlap_and_unknown() {
    let mut ls = LabelSpace::new(&[1, 2]).unwrap();
    assert!(matches!(ls.add(&[2, 3]), Err(Error::Contract(_))));
    assert!(matches!(ls.add(&[3, 3]), Err(Error::Contract(_))));
    assert!(matches!(ls.add(&[0]), Err(Error::Contract(_))));
    assert_eq!(ls.known(), &[1, 2]);
    assert!(LabelSpace::new(&[1, 1]).is_err());
}

#[test]
fn oracle_step_grows_classifier_and_moments() {
    let split = tiny_split();
    let mut s = fresh(&split, 3);
    let before = s.params.clone();
    assert_eq!(s.params.classifier_width(), 3);
    oracle_step(&mut s, &[3, 4]).unwrap();
    assert_eq!(s.params.classifier_width(), 5);
    assert_eq!(s.labels.width(), 5);
    let (w0, w1) = (before.get("head.cls.w").unwrap(), s.params.get("head.cls.w").unwrap());
    for r in 0..s.model.d {
        assert_eq!(&w1.row(r)[..3], w0.row(r));
    }
    assert_eq!(s.adam.m["head.cls.w"].len(), s.model.d * 5);
    assert_eq!(s.adam.v["head.cls.b"].len(), 5);
    for (name, t) in s.params.iter() {
        if !name.starts_with("head.cls") {
            assert_eq!(Some(t), before.get(name));
        }
    }
    assert!(matches!(oracle_step(&mut s, &[4, 5]), Err(Error::Contract(_))));
    assert_eq!(s.labels.width(), 5);
}

#[test]
fn empty_oracle_step_only_advances_task() {
    let split = tiny_split();
    let mut s = fresh(&split, 3);
    let params = s.params.clone();
    oracle_step(&mut s, &[]).unwrap();
    assert_eq!(s.labels.task(), 1);
    assert_eq!(s.params, params);
    assert_eq!(s.labels.known(), &[1, 2]);
}

#[test]
fn adam_single_step_matches_closed_form() {
    let params = Params::from_tensors([("x".to_string(), Tensor::new(&[2], vec![1.0, -2.0]).unwrap())]);
    let mut p = params.clone();
    let mut adam = Adam::new(&p);
    let cfg = AdamConfig::default();
    let grads = BTreeMap::from([("x".to_string(), vec![0.5, -4.0])]);
    adam.update(&mut p, &grads, 0.01, &cfg).unwrap();
    // first step: m̂ = g, v̂ = g², so the step is lr·(sign(g)·|g|/(|g|+eps) + wd·x)
    for (i, (&x, &g)) in [1.0f64, -2.0].iter().zip(&[0.5f64, -4.0]).enumerate() {
        let want = x - 0.01 * (g / (g.abs() + 1e-8) + 1e-4 * x);
        assert!((p.get("x").unwrap().data()[i] - want).abs() < 1e-15);
    }
    let stale = BTreeMap::from([("x".to_string(), vec![1.0])]);
    assert!(matches!(adam.update(&mut p, &stale, 0.01, &cfg), Err(Error::Contract(_))));
}

#[test]
fn zero_epochs_is_identity() {
    let f = fixture();
    let mut s = fresh(&f.split, 1);
    let params = s.params.clone();
    let logs = train_task(&mut s, &f.train[0], &TrainConfig::default(), &LossConfig::default(), 1e-3, 0).unwrap();
    assert!(logs.is_empty());
    assert_eq!(s.params, params);
    assert_eq!(s.steps_run, 0);
}

#[test]
fn two_epochs_reduce_mean_loss() {
    let f = fixture();
    let loss = LossConfig::default();
    let mut s = fresh(&f.split, 1);
    let initial = mean_loss(&s, &f.train[0], &loss);
    let logs = train_task(&mut s, &f.train[0], &TrainConfig::default(), &loss, 1e-3, 2).unwrap();
    let after = mean_loss(&s, &f.train[0], &loss);
    assert!(after < initial, "{initial} -> {after}");
    assert_eq!(logs.len(), 2);
    assert_eq!(logs[1].epoch, 2);
    assert_eq!(s.steps_run, 16);
    for l in &logs {
        assert!((l.loss - (l.l_n + l.l_r + loss.alpha * l.l_o)).abs() < 1e-9);
    }
}

#[test]
fn training_is_deterministic_under_seed() {
    let f = fixture();
    let cfg = TrainConfig {
        batch: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut s = fresh(&f.split, 11);
        train_task(&mut s, &f.train[0], &cfg, &LossConfig::default(), 1e-3, 2).unwrap();
        s
    };
    let (a, b) = (run(), run());
    assert_eq!(a.params, b.params);
    assert_eq!(a.adam, b.adam);
    assert_eq!(checkpoint_to_bytes(&a), checkpoint_to_bytes(&b));
    let c = {
        let mut s = fresh(&f.split, 12);
        train_task(&mut s, &f.train[0], &cfg, &LossConfig::default(), 1e-3, 2).unwrap();
        s
    };
    assert_ne!(a.params, c.params);
}

#[test]
fn training_on_unknown_labels_is_a_contract_error() {
    let f = fixture();
    let mut s = fresh(&f.split, 1);
    let err = train_task(&mut s, &f.train[1], &TrainConfig::default(), &LossConfig::default(), 1e-3, 1);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn divergence_keeps_last_good_parameters() {
    let f = fixture();
    let mut s = fresh(&f.split, 1);
    let mut images = f.train[0][..2].to_vec();
    let mut bad = (*images[1].pixels).clone();
    bad.data_mut()[0] = f64::INFINITY;
    images[1].pixels = Arc::new(bad);
    let cfg = TrainConfig::default();
    let mut reference = fresh(&f.split, 1);
    let err = train_task(&mut s, &images, &cfg, &LossConfig::default(), 1e-3, 3);
    assert!(matches!(err, Err(Error::Divergence(_))), "{err:?}");
    assert!(s.params.iter().all(|(_, t)| t.all_finite()));
    // every completed step is a clean step on the finite image
    let good = &images[..1];
    for _ in 0..s.steps_run {
        train_task(&mut reference, good, &cfg, &LossConfig::default(), 1e-3, 1).unwrap();
    }
    if s.steps_run == 0 {
        assert_eq!(s.params, fresh(&f.split, 1).params);
    } else {
        assert_eq!(s.params, reference.params);
    }
}

#[test]
fn exemplar_store_respects_cap_and_restricts_instances() {
    let f = fixture();
    let store = build_exemplar_store(&f.train[0], &[1, 2], 3, 7).unwrap();
    for (&c, exs) in &store.per_class {
        assert!(exs.len() <= 3);
        let ids: BTreeSet<u64> = exs.iter().map(|e| e.image_id).collect();
        assert_eq!(ids.len(), exs.len());
        for e in exs {
            assert!(!e.instances.is_empty());
            assert!(e.instances.iter().all(|i| i.label == c));
        }
    }
    assert_eq!(store, build_exemplar_store(&f.train[0], &[1, 2], 3, 7).unwrap());
    assert!(matches!(build_exemplar_store(&f.train[0], &[1], 0, 7), Err(Error::Config { .. })));
}

#[test]
fn undersupplied_class_keeps_every_image() {
    let f = fixture();
    let having: Vec<u64> = f.train[0]
        .iter()
        .filter(|i| i.instances.iter().any(|x| x.label == 2))
        .map(|i| i.image_id)
        .collect();
    let store = build_exemplar_store(&f.train[0], &[2], 50, 0).unwrap();
    let kept: Vec<u64> = store.per_class[&2].iter().map(|e| e.image_id).collect();
    assert_eq!(kept, having);
}

fn synthetic_images(rng: &mut ChaCha8Rng, n: usize) -> Vec<LabeledImage> {
    let px = Arc::new(Tensor::zeros(&[3, 16, 16]));
    (0..n)
        .map(|id| {
            let k = rng.random_range(0..4);
            let instances = (0..k)
                .map(|_| Instance {
                    label: rng.random_range(1..=4),
                    bbox: BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap(),
                })
                .collect();
            LabeledImage {
                image_id: id as u64,
                pixels: px.clone(),
                instances,
            }
        })
        .collect()
}

#[test]
fn exemplar_counts_match_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(0..30);
        let cap = rng.random_range(1..8);
        let images = synthetic_images(&mut rng, n);
        let store = build_exemplar_store(&images, &[1, 2, 3, 4], cap, rng.next_u64()).unwrap();
        for c in 1..=4u32 {
            let available = images.iter().filter(|i| i.instances.iter().any(|x| x.label == c)).count();
            assert_eq!(store.per_class[&c].len(), available.min(cap));
        }
    }
}

#[test]
fn exemplar_images_merge_classes_per_image() {
    let f = fixture();
    let store = build_exemplar_store(&f.train[0], &[1, 2], 50, 0).unwrap();
    let images = store.training_images(&f.bank).unwrap();
    for img in &images {
        let original = f.train[0].iter().find(|i| i.image_id == img.image_id).unwrap();
        let mut want = original.instances.clone();
        let mut got = img.instances.clone();
        let key = |i: &Instance| (i.label, i.bbox.cx.to_bits(), i.bbox.cy.to_bits());
        want.sort_by_key(key);
        got.sort_by_key(key);
        assert_eq!(got, want);
    }
    assert!(store.training_images(&ImageBank::default()).is_err());
}

#[test]
fn finetune_requires_exemplars_and_uses_reduced_lr() {
    let f = fixture();
    let mut s = fresh(&f.split, 1);
    let cfg = TrainConfig::full_scale();
    assert_eq!(cfg.finetune_lr(), 2e-4 * 0.1);
    assert!((cfg.finetune_lr() - 2e-5).abs() < 1e-20);
    let err = incremental_finetune(&mut s, &f.bank, &cfg, &LossConfig::default());
    assert!(matches!(err, Err(Error::Contract(_))));
    s.exemplars = build_exemplar_store(&f.train[0], &[1, 2], 2, 0).unwrap();
    let params = s.params.clone();
    let none = TrainConfig {
        finetune_epochs: 0,
        ..cfg.clone()
    };
    incremental_finetune(&mut s, &f.bank, &none, &LossConfig::default()).unwrap();
    assert_eq!(s.params, params);
    let logs = incremental_finetune(&mut s, &f.bank, &TrainConfig { finetune_epochs: 1, ..cfg }, &LossConfig::default())
        .unwrap();
    assert_eq!(logs.len(), 1);
    assert_ne!(s.params, params);
}

/// Repeated arg-max selection; the first maximum wins ties.
fn selection_oracle(scores: &[f64], cols: usize, k: usize, first_col: usize) -> Vec<(usize, usize)> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] || i % cols < first_col {
                continue;
            }
            if best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        taken[b] = true;
        out.push((b / cols, b % cols));
    }
    out
}

#[test]
fn topk_matches_selection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..500 {
        let m = rng.random_range(1..12);
        let c = rng.random_range(1..6);
        // coarse values force ties
        let scores = if trial % 2 == 0 {
            Tensor::from_fn(&[m, c], |_| f64::from(rng.random_range(0..5u8)) / 4.0)
        } else {
            Tensor::randn(&[m, c], 3.0, &mut rng).map(crate::numerics::sigmoid)
        };
        let k = rng.random_range(1..80);
        let first = rng.random_range(0..2).min(c - 1);
        assert_eq!(topk_entries(&scores, k, first), selection_oracle(scores.data(), c, k, first));
    }
}

#[test]
fn topk_small_case_returns_everything_sorted() {
    let scores = Tensor::new(&[2, 3], vec![0.1, 0.7, 0.3, 0.7, 0.2, 0.9]).unwrap();
    assert_eq!(
        topk_entries(&scores, 50, 0),
        vec![(1, 2), (0, 1), (1, 0), (0, 2), (1, 1), (0, 0)]
    );
    assert_eq!(topk_entries(&scores, 2, 1), vec![(1, 2), (0, 1)]);
}

#[test]
fn infer_contract() {
    let f = fixture();
    let s = fresh(&f.split, 2);
    assert_eq!(InferConfig::default().top_k, 50);
    let img = &f.test[0];
    let all = infer(&s, &img.pixels, img.image_id, &InferConfig::default()).unwrap();
    assert_eq!(all.detections.len(), s.model.m * s.labels.width());
    let cfg = InferConfig {
        top_k: 7,
        ..InferConfig::default()
    };
    let few = infer(&s, &img.pixels, img.image_id, &cfg).unwrap();
    assert_eq!(few.detections.len(), 7);
    assert_eq!(few.detections[..], all.detections[..7]);
    assert!(few.detections.windows(2).all(|w| w[0].score >= w[1].score));
    let closed = infer(
        &s,
        &img.pixels,
        img.image_id,
        &InferConfig {
            emit_unknown: false,
            ..InferConfig::default()
        },
    )
    .unwrap();
    assert_eq!(closed.detections.len(), s.model.m * 2);
    for d in all.detections.iter().chain(&closed.detections) {
        assert!(d.label == 0 || s.labels.contains(d.label));
        assert!(d.score > 0.0 && d.score < 1.0);
    }
    assert!(closed.detections.iter().all(|d| d.label != 0));
    assert!(matches!(
        infer_all(&s, &f.test, &InferConfig { top_k: 0, ..cfg }),
        Err(Error::Config { .. })
    ));
    let batch = infer_all(&s, &f.test, &cfg).unwrap();
    assert_eq!(batch[0], few);
}

#[test]
fn score_fusion_scales_by_objectness() {
    let f = fixture();
    let s = fresh(&f.split, 2);
    let img = &f.test[1];
    let plain = infer(&s, &img.pixels, 0, &InferConfig::default()).unwrap();
    let fused = infer(
        &s,
        &img.pixels,
        0,
        &InferConfig {
            score_fusion: true,
            ..InferConfig::default()
        },
    )
    .unwrap();
    assert_eq!(plain.detections.len(), fused.detections.len());
    let sum = |d: &DetectionSet| d.detections.iter().map(|x| x.score).sum::<f64>();
    assert!(sum(&fused) < sum(&plain));
}

fn trained_state(f: &Fixture) -> EpisodeState {
    let mut s = fresh(&f.split, 4);
    train_task(&mut s, &f.train[0][..3], &TrainConfig::default(), &LossConfig::default(), 1e-3, 1).unwrap();
    oracle_step(&mut s, &[3, 4]).unwrap();
    s.exemplars = build_exemplar_store(&f.train[0], &[1, 2], 2, 0).unwrap();
    s
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let f = fixture();
    let mut s = trained_state(&f);
    let bytes = checkpoint_to_bytes(&s);
    let mut back = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint_to_bytes(&back), bytes);
    assert_eq!(back.params, s.params);
    assert_eq!(back.adam, s.adam);
    assert_eq!(back.labels, s.labels);
    assert_eq!(back.exemplars, s.exemplars);
    assert_eq!((back.epochs_run, back.steps_run), (s.epochs_run, s.steps_run));
    assert_eq!(back.rng.next_u64(), s.rng.next_u64());
    for img in &f.test {
        let cfg = InferConfig::default();
        assert_eq!(
            infer(&back, &img.pixels, img.image_id, &cfg).unwrap(),
            infer(&s, &img.pixels, img.image_id, &cfg).unwrap()
        );
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let f = fixture();
    let s = trained_state(&f);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/state.ckpt");
    checkpoint_save(&s, &path).unwrap();
    let back = checkpoint_load(&path).unwrap();
    let again = dir.path().join("again.ckpt");
    checkpoint_save(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert!(matches!(checkpoint_load(&dir.path().join("absent.ckpt")), Err(Error::Missing(_))));
}

#[test]
fn checkpoint_faults_have_distinct_kinds() {
    let f = fixture();
    let bytes = checkpoint_to_bytes(&trained_state(&f));
    let mut flipped = bytes.clone();
    let mid = bytes.len() - 100;
    flipped[mid] ^= 0x01;
    assert!(matches!(checkpoint_from_bytes(&flipped), Err(Error::Checksum)));
    let mut header_hit = bytes.clone();
    header_hit[40] ^= 0x20;
    assert!(matches!(checkpoint_from_bytes(&header_hit), Err(Error::Checksum)));
    assert!(matches!(
        checkpoint_from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::Truncated { .. })
    ));
    assert!(matches!(checkpoint_from_bytes(&bytes[..10]), Err(Error::Truncated { .. })));
    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        checkpoint_from_bytes(&versioned),
        Err(Error::Version { found: 7, expected: 1 })
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(checkpoint_from_bytes(&magic), Err(Error::Parse { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topk_is_sorted_prefix_of_full_ranking(seed in 0u64..10_000, k in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = Tensor::uniform(&[6, 4], 0.0, 1.0, &mut rng);
        let top = topk_entries(&scores, k, 0);
        let all = topk_entries(&scores, usize::MAX, 0);
        prop_assert_eq!(top.len(), k.min(24));
        prop_assert_eq!(&top[..], &all[..top.len()]);
        let v: Vec<f64> = top.iter().map(|&(q, c)| scores.data()[q * 4 + c]).collect();
        prop_assert!(v.windows(2).all(|w| w[0] >= w[1]));
    }
}
