use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{bind, forward, ModelConfig, Params};
use crate::numerics::gradcheck::{gradcheck, probe};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(cx, cy, w, h).unwrap()
}

/// Independent loop: visit every cell, keep those whose center lies in the window.
pub(crate) fn window_mean_oracle(a: &Tensor, b: &BoundingBox) -> f64 {
    let (gh, gw) = a.rows_cols();
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..gh {
        for j in 0..gw {
            let x = (j as f64 + 0.5) / gw as f64;
            let y = (i as f64 + 0.5) / gh as f64;
            if x >= b.cx - b.w / 2.0 && x <= b.cx + b.w / 2.0 && y >= b.cy - b.h / 2.0 && y <= b.cy + b.h / 2.0 {
                s += a.row(i)[j];
                n += 1;
            }
        }
    }
    s / n as f64
}

#[test]
fn objectness_constant_and_full_window() {
    let a = Tensor::full(&[8, 8], 0.5);
    for rule in [WindowRule::CenterInclusion, WindowRule::FractionalArea] {
        assert_eq!(objectness_score(&a, &bx(0.3, 0.6, 0.2, 0.35), rule).unwrap(), 0.5);
    }
    let a = Tensor::uniform(&[8, 8], 0.0, 3.0, &mut rng(1));
    let mean = a.data().iter().sum::<f64>() / 64.0;
    for rule in [WindowRule::CenterInclusion, WindowRule::FractionalArea] {
        let s = objectness_score(&a, &bx(0.5, 0.5, 1.0, 1.0), rule).unwrap();
        assert!((s - mean).abs() < 1e-12);
    }
}

#[test]
fn objectness_known_2x3_window() {
    let a = Tensor::uniform(&[8, 8], -1.0, 1.0, &mut rng(2));
    // rows 2..4, cols 3..6
    let b = bx(4.5 / 8.0, 3.0 / 8.0, 3.0 / 8.0, 2.0 / 8.0);
    let mut s = 0.0;
    for i in 2..4 {
        for j in 3..6 {
            s += a.row(i)[j];
        }
    }
    let got = objectness_score(&a, &b, WindowRule::CenterInclusion).unwrap();
    assert!((got - s / 6.0).abs() < 1e-12);
    // the window is cell-aligned, so area weighting agrees
    let got = objectness_score(&a, &b, WindowRule::FractionalArea).unwrap();
    assert!((got - s / 6.0).abs() < 1e-12);
}

#[test]
fn objectness_sub_cell_window_reads_center_cell() {
    let a = Tensor::from_fn(&[4, 4], |i| i as f64);
    // inside cell (1, 2) without reaching its center
    let b = bx(2.2 / 4.0, 1.3 / 4.0, 0.05, 0.05);
    assert_eq!(objectness_score(&a, &b, WindowRule::CenterInclusion).unwrap(), 6.0);
    assert_eq!(objectness_score(&a, &b, WindowRule::FractionalArea).unwrap(), 6.0);
}

#[test]
fn objectness_outside_grid_is_score_error() {
    let a = Tensor::full(&[4, 4], 1.0);
    let b = BoundingBox { cx: 1.5, cy: 0.5, w: 0.2, h: 0.2 };
    assert!(matches!(
        objectness_score(&a, &b, WindowRule::CenterInclusion),
        Err(crate::Error::Score(_))
    ));
}

#[test]
fn objectness_1000_random_pairs_match_loop_oracle() {
    let mut r = rng(3);
    for _ in 0..1000 {
        let (gh, gw) = (r.random_range(2..17), r.random_range(2..17));
        let a = Tensor::uniform(&[gh, gw], 0.0, 5.0, &mut r);
        // at least one cell wide, so the window always holds a cell center
        let b = bx(
            r.random_range(0.2..0.8),
            r.random_range(0.2..0.8),
            r.random_range(1.0 / gw as f64 + 0.01..0.6),
            r.random_range(1.0 / gh as f64 + 0.01..0.6),
        );
        let got = objectness_score(&a, &b, WindowRule::CenterInclusion).unwrap();
        assert!((got - window_mean_oracle(&a, &b)).abs() < 1e-12);
    }
}

/// `M` one-cell boxes on a 4×4 map whose cells hold `values`.
fn cell_setup(values: &[f64]) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(&[4, 4]);
    let mut boxes = Vec::new();
    for (q, &v) in values.iter().enumerate() {
        let (i, j) = (q / 4, q % 4);
        a.data_mut()[i * 4 + j] = v;
        boxes.extend([(j as f64 + 0.5) / 4.0, (i as f64 + 0.5) / 4.0, 0.2, 0.2]);
    }
    let m = values.len();
    (a, Tensor::new(&[m, 4], boxes).unwrap())
}

#[test]
fn pseudo_selection_sort_oracle_example() {
    // queries 1 and 4 matched; unmatched 0, 2, 3, 5 score 0.9, 0.1, 0.5, 0.7
    let (a, boxes) = cell_setup(&[0.9, 0.99, 0.1, 0.5, 0.98, 0.7]);
    let matching = MatchResult {
        pairs: vec![(1, 0), (4, 1)],
        unmatched_queries: vec![0, 2, 3, 5],
    };
    let p = select_pseudo_unknowns(&boxes, &matching, &a, 3, WindowRule::CenterInclusion);
    assert_eq!(p.queries, vec![0, 5, 3]);
    assert_eq!(p.scores, vec![0.9, 0.7, 0.5]);
}

#[test]
fn pseudo_selection_edge_cases() {
    let (a, boxes) = cell_setup(&[0.4, 0.4, 0.4, 0.2]);
    let matching = MatchResult {
        pairs: vec![],
        unmatched_queries: vec![0, 1, 2, 3],
    };
    let p = select_pseudo_unknowns(&boxes, &matching, &a, 2, WindowRule::CenterInclusion);
    assert_eq!(p.queries, vec![0, 1]);

    let all = MatchResult {
        pairs: vec![(0, 0), (1, 1), (2, 2), (3, 3)],
        unmatched_queries: vec![],
    };
    assert!(select_pseudo_unknowns(&boxes, &all, &a, 5, WindowRule::CenterInclusion).is_empty());
    assert!(select_pseudo_unknowns(&boxes, &matching, &a, 0, WindowRule::CenterInclusion).is_empty());
}

/// Sort oracle: rank by (score desc, index asc) using the loop-oracle scores.
fn pseudo_oracle(boxes: &Tensor, unmatched: &[usize], a: &Tensor, k: usize) -> Vec<usize> {
    let mut v: Vec<(usize, f64)> = unmatched
        .iter()
        .map(|&q| {
            let r = boxes.row(q);
            (q, window_mean_oracle(a, &BoundingBox { cx: r[0], cy: r[1], w: r[2], h: r[3] }))
        })
        .collect();
    v.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    v.into_iter().take(k).map(|x| x.0).collect()
}

#[test]
fn pseudo_selection_1000_random_cases_match_sort_oracle() {
    let mut r = rng(4);
    for case in 0..1000 {
        let m = r.random_range(1..12);
        // coarse values make ties common
        let a = Tensor::from_fn(&[6, 6], |_| r.random_range(0..4) as f64);
        let boxes = Tensor::from_fn(&[m, 4], |i| {
            if i % 4 < 2 {
                r.random_range(0.25..0.75)
            } else {
                r.random_range(0.2..0.5)
            }
        });
        let mut unmatched: Vec<usize> = (0..m).filter(|_| r.random_bool(0.7)).collect();
        unmatched.sort_unstable();
        let matching = MatchResult {
            pairs: (0..m).filter(|q| !unmatched.contains(q)).map(|q| (q, q)).collect(),
            unmatched_queries: unmatched.clone(),
        };
        let k = r.random_range(0..6);
        let got = select_pseudo_unknowns(&boxes, &matching, &a, k, WindowRule::CenterInclusion);
        assert_eq!(got.queries, pseudo_oracle(&boxes, &unmatched, &a, k), "case {case}");
        assert_eq!(got.len(), k.min(unmatched.len()));
    }
}

#[test]
fn targets_examples() {
    let none = build_training_targets(4, &MatchResult { pairs: vec![], unmatched_queries: vec![0, 1, 2, 3] }, &[], &[1], &PseudoLabelSet::default()).unwrap();
    assert!(none.class.iter().all(Option::is_none));
    assert_eq!(none.n_foreground(), 0);

    let gts = vec![
        Instance { label: 5, bbox: bx(0.2, 0.2, 0.1, 0.1) },
        Instance { label: 1, bbox: bx(0.7, 0.7, 0.2, 0.2) },
    ];
    let known = [1u32, 5];
    let matching = MatchResult {
        pairs: vec![(3, 0), (8, 1)],
        unmatched_queries: vec![0, 1, 2, 4, 5, 6, 7, 9],
    };
    let pseudo = PseudoLabelSet {
        queries: vec![6, 0, 9],
        boxes: vec![bx(0.5, 0.5, 0.1, 0.1); 3],
        scores: vec![0.3, 0.2, 0.1],
    };
    let t = build_training_targets(10, &matching, &gts, &known, &pseudo).unwrap();
    assert_eq!(t.n_foreground(), 5);
    assert_eq!(t.class[3], Some(2));
    assert_eq!(t.class[8], Some(1));
    assert_eq!(t.boxes[3], Some(gts[0].bbox));
    for q in [6, 0, 9] {
        assert_eq!(t.class[q], Some(0));
        assert!(t.boxes[q].is_none());
    }
    let m = t.class_matrix(3);
    assert_eq!(m.row(3), &[0.0, 0.0, 1.0]);
    assert_eq!(m.row(1), &[0.0, 0.0, 0.0]);

    let bad = PseudoLabelSet { queries: vec![3], ..pseudo };
    assert!(matches!(
        build_training_targets(10, &matching, &gts, &known, &bad),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn targets_random_vs_constructor_oracle() {
    let mut r = rng(5);
    let known = [2u32, 4, 6];
    for _ in 0..300 {
        let m = r.random_range(1..15);
        let k = r.random_range(0..=m.min(4));
        let mut qs: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            qs.swap(i, r.random_range(0..=i));
        }
        let gts: Vec<Instance> = (0..k)
            .map(|_| Instance { label: known[r.random_range(0..3)], bbox: bx(0.5, 0.5, 0.2, 0.2) })
            .collect();
        let pairs: Vec<(usize, usize)> = (0..k).map(|g| (qs[g], g)).collect();
        let mut unmatched = qs[k..].to_vec();
        unmatched.sort_unstable();
        let n_p = r.random_range(0..=unmatched.len());
        let pseudo_q: Vec<usize> = qs[k..k + n_p].to_vec();
        let matching = MatchResult { pairs: pairs.clone(), unmatched_queries: unmatched };
        let pseudo = PseudoLabelSet {
            queries: pseudo_q.clone(),
            boxes: vec![bx(0.5, 0.5, 0.1, 0.1); n_p],
            scores: vec![0.0; n_p],
        };
        let t = build_training_targets(m, &matching, &gts, &known, &pseudo).unwrap();
        for q in 0..m {
            let (class, obj, bbox) = if let Some(&(_, g)) = pairs.iter().find(|p| p.0 == q) {
                let col = 1 + known.iter().position(|&c| c == gts[g].label).unwrap();
                (Some(col), true, Some(gts[g].bbox))
            } else if pseudo_q.contains(&q) {
                (Some(0), true, None)
            } else {
                (None, false, None)
            };
            assert_eq!((t.class[q], t.objectness[q], t.boxes[q]), (class, obj, bbox));
        }
        let bg = t.objectness.iter().filter(|o| !**o).count();
        assert_eq!(n_p + k + bg, m);
    }
}

fn focal_value_of(logits: &Tensor, targets: &Tensor, gamma: f64, alpha: f64) -> f64 {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = focal_loss(&mut tape, z, targets, gamma, alpha).unwrap();
    tape.value(l).item()
}

#[test]
fn focal_perfect_prediction_is_zero() {
    let targets = Tensor::new(&[2, 3], vec![0., 1., 0., 0., 0., 0.]).unwrap();
    let logits = targets.map(|t| if t > 0.0 { 800.0 } else { -800.0 });
    assert_eq!(focal_value_of(&logits, &targets, 2.0, 0.25), 0.0);
}

/// BCE from its textbook definition, normalized like the focal loss.
fn bce_oracle(logits: &Tensor, targets: &Tensor) -> f64 {
    let (_, c) = targets.rows_cols();
    let fg = targets.data().chunks(c).filter(|r| r.iter().any(|&v| v > 0.0)).count().max(1);
    let s: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &t)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    s / fg as f64
}

#[test]
fn focal_gamma_zero_alpha_one_is_bce() {
    let mut r = rng(6);
    for _ in 0..200 {
        let (n, c) = (r.random_range(1..6), r.random_range(1..5));
        let logits = Tensor::uniform(&[n, c], -6.0, 6.0, &mut r);
        let targets = Tensor::from_fn(&[n, c], |_| f64::from(u8::from(r.random_bool(0.3))));
        let got = focal_value_of(&logits, &targets, 0.0, 1.0);
        assert!((got - bce_oracle(&logits, &targets)).abs() < 1e-12);
    }
}

#[test]
fn focal_single_positive_closed_form() {
    let z = (0.9f64 / 0.1).ln();
    let logits = Tensor::new(&[1, 1], vec![z]).unwrap();
    let targets = Tensor::new(&[1, 1], vec![1.0]).unwrap();
    let expect = -0.25 * 0.1f64.powi(2) * 0.9f64.ln();
    assert!((focal_value_of(&logits, &targets, 2.0, 0.25) - expect).abs() < 1e-12);
}

#[test]
fn box_loss_examples() {
    let t = bx(0.4, 0.5, 0.2, 0.3);
    let mut tape = Tape::new();
    let pred = tape.constant(Tensor::new(&[2, 4], vec![0.9, 0.9, 0.1, 0.1, 0.4, 0.5, 0.2, 0.3]).unwrap());
    let l = l1_box_loss(&mut tape, pred, &[(1, t)], 5.0, 2.0).unwrap();
    assert!(tape.value(l.total).item().abs() < 1e-15);

    let pred = tape.constant(Tensor::new(&[1, 4], vec![0.5, 0.5, 0.2, 0.3]).unwrap());
    let l = l1_box_loss(&mut tape, pred, &[(0, t)], 5.0, 2.0).unwrap();
    assert!((tape.value(l.l1).item() - 0.1).abs() < 1e-12);

    let l = l1_box_loss(&mut tape, pred, &[], 5.0, 2.0).unwrap();
    assert_eq!(tape.value(l.total).item(), 0.0);
}

#[test]
fn box_loss_random_vs_direct_sum() {
    let mut r = rng(7);
    for _ in 0..100 {
        let m = r.random_range(1..8);
        let boxes = Tensor::uniform(&[m, 4], 0.05, 0.9, &mut r);
        let n = r.random_range(1..=m);
        let pairs: Vec<(usize, BoundingBox)> = (0..n)
            .map(|i| (i, bx(r.random_range(0.1..0.9), r.random_range(0.1..0.9), r.random_range(0.05..0.5), r.random_range(0.05..0.5))))
            .collect();
        let mut tape = Tape::new();
        let bv = tape.constant(boxes.clone());
        let l = l1_box_loss(&mut tape, bv, &pairs, 5.0, 2.0).unwrap();
        let (mut l1, mut g) = (0.0, 0.0);
        for (q, t) in &pairs {
            let p = boxes.row(*q);
            l1 += (p[0] - t.cx).abs() + (p[1] - t.cy).abs() + (p[2] - t.w).abs() + (p[3] - t.h).abs();
            g += 1.0 - crate::matching::giou(&BoundingBox { cx: p[0], cy: p[1], w: p[2], h: p[3] }, t).unwrap();
        }
        let (l1, g) = (l1 / n as f64, g / n as f64);
        assert!((tape.value(l.l1).item() - l1).abs() < 1e-12);
        assert!((tape.value(l.giou).item() - g).abs() < 1e-12);
        assert!((tape.value(l.total).item() - (5.0 * l1 + 2.0 * g)).abs() < 1e-12);
    }
}

#[test]
fn box_loss_gradcheck() {
    let boxes = Tensor::uniform(&[4, 4], 0.1, 0.6, &mut rng(8));
    let pairs = vec![(0, bx(0.3, 0.3, 0.2, 0.4)), (2, bx(0.6, 0.5, 0.3, 0.2)), (3, bx(0.9, 0.1, 0.1, 0.1))];
    let report = gradcheck(
        |tape, v| Ok(l1_box_loss(tape, v[0], &pairs, 5.0, 2.0)?.total),
        &[boxes],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn joint_loss_arithmetic_and_divergence() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let j = joint_loss(&mut tape, z, z, z, 0.1).unwrap();
    assert_eq!(tape.value(j).item(), 0.0);

    let (a, b, c) = (
        tape.constant(Tensor::scalar(1.0)),
        tape.constant(Tensor::scalar(2.0)),
        tape.constant(Tensor::scalar(3.0)),
    );
    let j = joint_loss(&mut tape, a, b, c, 0.1).unwrap();
    assert!((tape.value(j).item() - 3.3).abs() < 1e-12);

    let bad = tape.constant(Tensor::scalar(f64::INFINITY));
    assert!(matches!(
        joint_loss(&mut tape, a, bad, c, 0.1),
        Err(crate::Error::Divergence(_))
    ));
}

#[test]
fn joint_loss_gradient_is_weighted_component_sum() {
    let x = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng(9));
    let parts = |tape: &mut Tape, v: Var| -> Result<(Var, Var, Var)> {
        let s = tape.sigmoid(v);
        let ln = probe(tape, s)?;
        let sq = tape.mul(v, v)?;
        let lr = tape.sum(sq);
        let lo = tape.mean(v);
        Ok((ln, lr, lo))
    };
    let grad_of = |pick: usize| -> Vec<f64> {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let (ln, lr, lo) = parts(&mut tape, v).unwrap();
        let l = match pick {
            0 => ln,
            1 => lr,
            2 => lo,
            _ => joint_loss(&mut tape, ln, lr, lo, 0.1).unwrap(),
        };
        tape.backward(l).unwrap();
        tape.grad(v).unwrap().to_vec()
    };
    let (gn, gr, go, gj) = (grad_of(0), grad_of(1), grad_of(2), grad_of(3));
    for i in 0..6 {
        assert!((gj[i] - (gn[i] + gr[i] + 0.1 * go[i])).abs() < 1e-12);
    }
    let report = gradcheck(
        |tape, v| {
            let (ln, lr, lo) = parts(tape, v[0])?;
            joint_loss(tape, ln, lr, lo, 0.1)
        },
        &[x.clone()],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

fn tiny() -> ModelConfig {
    ModelConfig {
        d: 8,
        m: 6,
        levels: 2,
        points: 2,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn: 8,
        backbone_width: 4,
        attention_stage: 1,
    }
}

#[test]
fn image_loss_reaches_every_module() {
    let cfg = tiny();
    let params = Params::init(&cfg, 2, &mut rng(10)).unwrap();
    let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng(11));
    let gts = vec![
        Instance { label: 3, bbox: bx(0.3, 0.3, 0.25, 0.3) },
        Instance { label: 7, bbox: bx(0.7, 0.6, 0.2, 0.2) },
    ];
    let mut tape = Tape::new();
    let p = bind(&params, &mut tape, true);
    let out = forward(&mut tape, &p, &cfg, &img, 2).unwrap();
    let loss = image_loss(&mut tape, &out, &gts, &[3, 7], &LossConfig::default()).unwrap();
    assert_eq!(loss.matching.pairs.len(), 2);
    assert_eq!(loss.pseudo.len(), 4);
    let bg = loss.targets.objectness.iter().filter(|o| !**o).count();
    assert_eq!(loss.pseudo.len() + 2 + bg, cfg.m);
    tape.backward(loss.total).unwrap();
    for prefix in ["head.cls", "head.obj", "head.box", "decoder", "encoder", "backbone"] {
        let norm: f64 = p
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| tape.grad(v).unwrap().iter().map(|g| g * g).sum::<f64>())
            .sum();
        assert!(norm > 0.0, "no gradient reaches {prefix}");
    }
}

#[test]
fn switches_shape_the_loss() {
    let cfg = tiny();
    let params = Params::init(&cfg, 1, &mut rng(12)).unwrap();
    let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng(13));
    let gts = vec![Instance { label: 1, bbox: bx(0.4, 0.4, 0.3, 0.3) }];
    let run = |novelty: bool, objectness: bool| {
        let mut tape = Tape::new();
        let p = bind(&params, &mut tape, false);
        let out = forward(&mut tape, &p, &cfg, &img, 1).unwrap();
        let lc = LossConfig { novelty, objectness, ..LossConfig::default() };
        image_loss(&mut tape, &out, &gts, &[1], &lc).unwrap()
    };
    let base = run(false, false);
    assert!(base.pseudo.is_empty());
    assert_eq!(base.l_o, 0.0);
    assert!(base.targets.class.iter().all(|c| *c != Some(0)));
    let nc = run(true, false);
    assert_eq!(nc.pseudo.len(), 5);
    assert_eq!(nc.l_o, 0.0);
    assert!(nc.targets.class.iter().filter(|c| **c == Some(0)).count() == 5);
    let full = run(true, true);
    assert!(full.l_o > 0.0);
    let obj_only = run(false, true);
    assert!(obj_only.targets.class.iter().all(|c| *c != Some(0)));
    assert_eq!(obj_only.targets.n_foreground(), 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objectness_scales_linearly_and_ranking_is_affine_invariant(
        seed in 0u64..10_000,
        c in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let mut r = rng(seed);
        let a = Tensor::uniform(&[8, 8], 0.0, 1.0, &mut r);
        let b = bx(r.random_range(0.3..0.7), r.random_range(0.3..0.7), r.random_range(0.2..0.5), r.random_range(0.2..0.5));
        let s = objectness_score(&a, &b, WindowRule::CenterInclusion).unwrap();
        let scaled = a.map(|v| c * v);
        let sc = objectness_score(&scaled, &b, WindowRule::CenterInclusion).unwrap();
        prop_assert!((sc - c * s).abs() < 1e-12 * c.max(1.0));

        let boxes = Tensor::from_fn(&[8, 4], |i| if i % 4 < 2 { r.random_range(0.3..0.7) } else { r.random_range(0.2..0.5) });
        let matching = MatchResult { pairs: vec![(1, 0)], unmatched_queries: vec![0, 2, 3, 4, 5, 6, 7] };
        let p = select_pseudo_unknowns(&boxes, &matching, &a, 3, WindowRule::CenterInclusion);
        let affine = a.map(|v| c * v + shift);
        let q = select_pseudo_unknowns(&boxes, &matching, &affine, 3, WindowRule::CenterInclusion);
        prop_assert_eq!(&p.queries, &q.queries);
        prop_assert!(!p.queries.contains(&1));
        prop_assert!(p.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn focal_nonnegative_and_monotone(z in -20.0f64..20.0, dz in 0.01f64..5.0, gamma in 0.0f64..4.0, alpha in 0.05f64..1.0) {
        let t = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let lo = focal_value_of(&Tensor::new(&[1, 1], vec![z]).unwrap(), &t, gamma, alpha);
        let hi = focal_value_of(&Tensor::new(&[1, 1], vec![z + dz]).unwrap(), &t, gamma, alpha);
        prop_assert!(lo >= 0.0 && hi >= 0.0);
        prop_assert!(hi <= lo);
        let neg = focal_value_of(&Tensor::new(&[1, 1], vec![z]).unwrap(), &Tensor::zeros(&[1, 1]), gamma, alpha);
        prop_assert!(neg >= 0.0);
    }
}
