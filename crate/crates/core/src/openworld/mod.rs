//! Attention-driven pseudo-labeling, novelty/objectness targets and the joint loss.

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Instance};
use crate::error::{Error, Result};
use crate::matching::{build_cost_matrix, class_column, hungarian_assign, CostWeights, MatchResult, MIN_BOX_SIDE};
use crate::model::ForwardOutput;
use crate::numerics::{Tape, Tensor, Var};

/// How window objectness discretizes a box window on the attention grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowRule {
    /// Mean over cells whose centers lie inside the window.
    #[default]
    CenterInclusion,
    /// Mean weighted by each cell's overlap area with the window.
    FractionalArea,
}

/// Window objectness: mean of `A[h×w]` over the window of `b` (normalized image coordinates).
///
/// A window that covers no cell center falls back to the cell holding the box center.
pub fn objectness_score(a: &Tensor, b: &BoundingBox, rule: WindowRule) -> Result<f64> {
    let (gh, gw) = a.rows_cols();
    let [x0, y0, x1, y1] = b.xyxy();
    let (x0, x1) = (x0 * gw as f64, x1 * gw as f64);
    let (y0, y1) = (y0 * gh as f64, y1 * gh as f64);
    let (cx0, cx1) = (x0.max(0.0), x1.min(gw as f64));
    let (cy0, cy1) = (y0.max(0.0), y1.min(gh as f64));
    if !(cx1 > cx0 && cy1 > cy0) {
        return Err(Error::Score(format!("{b:?} on a {gh}×{gw} grid")));
    }
    let data = a.data();
    match rule {
        WindowRule::CenterInclusion => {
            let cols: Vec<usize> = (0..gw)
                .filter(|&j| (x0..=x1).contains(&(j as f64 + 0.5)))
                .collect();
            let rows: Vec<usize> = (0..gh)
                .filter(|&i| (y0..=y1).contains(&(i as f64 + 0.5)))
                .collect();
            if cols.is_empty() || rows.is_empty() {
                let j = (((cx0 + cx1) / 2.0) as usize).min(gw - 1);
                let i = (((cy0 + cy1) / 2.0) as usize).min(gh - 1);
                return Ok(data[i * gw + j]);
            }
            let mut s = 0.0;
            for &i in &rows {
                for &j in &cols {
                    s += data[i * gw + j];
                }
            }
            Ok(s / (rows.len() * cols.len()) as f64)
        }
        WindowRule::FractionalArea => {
            let (mut s, mut wsum) = (0.0, 0.0);
            for i in cy0.floor() as usize..(cy1.ceil() as usize).min(gh) {
                let fy = (cy1.min(i as f64 + 1.0) - cy0.max(i as f64)).max(0.0);
                for j in cx0.floor() as usize..(cx1.ceil() as usize).min(gw) {
                    let fx = (cx1.min(j as f64 + 1.0) - cx0.max(j as f64)).max(0.0);
                    s += fx * fy * data[i * gw + j];
                    wsum += fx * fy;
                }
            }
            Ok(s / wsum)
        }
    }
}

fn pred_box(boxes: &Tensor, q: usize) -> BoundingBox {
    let r = boxes.row(q);
    BoundingBox {
        cx: r[0],
        cy: r[1],
        w: r[2].max(MIN_BOX_SIDE),
        h: r[3].max(MIN_BOX_SIDE),
    }
}

/// Unmatched queries pseudo-labeled unknown, best objectness first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub queries: Vec<usize>,
    pub boxes: Vec<BoundingBox>,
    pub scores: Vec<f64>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Top-`k_u` unmatched queries by objectness score; ties go to the lower query index.
pub fn select_pseudo_unknowns(
    boxes: &Tensor,
    matching: &MatchResult,
    a: &Tensor,
    k_u: usize,
    rule: WindowRule,
) -> PseudoLabelSet {
    let mut cands: Vec<(usize, BoundingBox, f64)> = matching
        .unmatched_queries
        .iter()
        .filter_map(|&q| {
            let b = pred_box(boxes, q);
            objectness_score(a, &b, rule).ok().map(|s| (q, b, s))
        })
        .collect();
    cands.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
    cands.truncate(k_u);
    PseudoLabelSet {
        queries: cands.iter().map(|c| c.0).collect(),
        boxes: cands.iter().map(|c| c.1).collect(),
        scores: cands.iter().map(|c| c.2).collect(),
    }
}

/// Per-query supervision. `class[q]` is a classifier column (0 = unknown) or `None` for background.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTargets {
    pub class: Vec<Option<usize>>,
    pub objectness: Vec<bool>,
    pub boxes: Vec<Option<BoundingBox>>,
}

impl TrainingTargets {
    /// Binary `M×width` matrix with one positive per foreground row.
    pub fn class_matrix(&self, width: usize) -> Tensor {
        let mut t = Tensor::zeros(&[self.class.len(), width]);
        for (q, c) in self.class.iter().enumerate() {
            if let Some(c) = c {
                t.data_mut()[q * width + c] = 1.0;
            }
        }
        t
    }

    pub fn objectness_column(&self) -> Tensor {
        Tensor::from_fn(&[self.objectness.len(), 1], |q| f64::from(u8::from(self.objectness[q])))
    }

    pub fn n_foreground(&self) -> usize {
        self.objectness.iter().filter(|&&o| o).count()
    }
}

/// Targets for `m` queries from the matching and the pseudo-unknown set.
pub fn build_training_targets(
    m: usize,
    matching: &MatchResult,
    gts: &[Instance],
    known: &[u32],
    pseudo: &PseudoLabelSet,
) -> Result<TrainingTargets> {
    let mut t = TrainingTargets {
        class: vec![None; m],
        objectness: vec![false; m],
        boxes: vec![None; m],
    };
    for &(q, g) in &matching.pairs {
        let gt = gts
            .get(g)
            .ok_or_else(|| Error::contract(format!("match refers to missing gt {g}")))?;
        let col = class_column(known, gt.label)
            .ok_or_else(|| Error::contract(format!("matched gt label {} is not known", gt.label)))?;
        t.class[q] = Some(col);
        t.objectness[q] = true;
        t.boxes[q] = Some(gt.bbox);
    }
    for &q in &pseudo.queries {
        if t.objectness[q] {
            return Err(Error::contract(format!("query {q} is both matched and pseudo-labeled")));
        }
        t.class[q] = Some(0);
        t.objectness[q] = true;
    }
    Ok(t)
}

/// Sigmoid focal loss summed over all entries, divided by the number of rows
/// holding a positive target (at least 1).
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &Tensor, gamma: f64, alpha: f64) -> Result<Var> {
    let (_, c) = targets.rows_cols();
    let fg = targets.data().chunks(c).filter(|r| r.iter().any(|&v| v > 0.0)).count();
    let per = tape.sigmoid_focal(logits, targets, gamma, alpha)?;
    let s = tape.sum(per);
    Ok(tape.scale(s, 1.0 / fg.max(1) as f64))
}

/// Box regression terms over matched pairs.
#[derive(Clone, Copy, Debug)]
pub struct BoxLoss {
    /// Mean over pairs of `‖pred − target‖₁`.
    pub l1: Var,
    /// Mean over pairs of `1 − GIoU`.
    pub giou: Var,
    /// `w_l1 · l1 + w_giou · giou`.
    pub total: Var,
}

/// `pairs` holds `(query, target box)`; all terms are zero when it is empty.
pub fn l1_box_loss(
    tape: &mut Tape,
    boxes: Var,
    pairs: &[(usize, BoundingBox)],
    w_l1: f64,
    w_giou: f64,
) -> Result<BoxLoss> {
    if pairs.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        return Ok(BoxLoss {
            l1: z,
            giou: z,
            total: z,
        });
    }
    let n = pairs.len();
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let pred = tape.gather_rows(boxes, &rows)?;
    let target = Tensor::new(
        &[n, 4],
        pairs.iter().flat_map(|(_, b)| [b.cx, b.cy, b.w, b.h]).collect(),
    )?;
    let tv = tape.constant(target.clone());
    let d = tape.sub(pred, tv)?;
    let d = tape.abs(d);
    let s = tape.sum(d);
    let l1 = tape.scale(s, 1.0 / n as f64);

    let g = giou_rows(tape, pred, &target)?;
    let m = tape.mean(g);
    let neg = tape.scale(m, -1.0);
    let giou = tape.add_scalar(neg, 1.0);

    let a = tape.scale(l1, w_l1);
    let b = tape.scale(giou, w_giou);
    let total = tape.add(a, b)?;
    Ok(BoxLoss { l1, giou, total })
}

/// Differentiable GIoU between predicted rows `pred[n×4]` and fixed targets.
fn giou_rows(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let n = target.rows_cols().0;
    let col = |tape: &mut Tape, v: Var, i: usize| tape.slice_cols(v, i, 1);
    let (cx, cy) = (col(tape, pred, 0)?, col(tape, pred, 1)?);
    let w = col(tape, pred, 2)?;
    let w = tape.clamp_min(w, MIN_BOX_SIDE);
    let h = col(tape, pred, 3)?;
    let h = tape.clamp_min(h, MIN_BOX_SIDE);
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let px0 = tape.sub(cx, hw)?;
    let px1 = tape.add(cx, hw)?;
    let py0 = tape.sub(cy, hh)?;
    let py1 = tape.add(cy, hh)?;

    let t = |f: &dyn Fn(&[f64]) -> f64| Tensor::from_fn(&[n, 1], |i| f(target.row(i)));
    let tx0 = tape.constant(t(&|r| r[0] - r[2] / 2.0));
    let tx1 = tape.constant(t(&|r| r[0] + r[2] / 2.0));
    let ty0 = tape.constant(t(&|r| r[1] - r[3] / 2.0));
    let ty1 = tape.constant(t(&|r| r[1] + r[3] / 2.0));
    let tarea = tape.constant(t(&|r| r[2] * r[3]));

    let ix1 = tape.minimum(px1, tx1)?;
    let ix0 = tape.maximum(px0, tx0)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.clamp_min(iw, 0.0);
    let iy1 = tape.minimum(py1, ty1)?;
    let iy0 = tape.maximum(py0, ty0)?;
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.clamp_min(ih, 0.0);
    let inter = tape.mul(iw, ih)?;
    let parea = tape.mul(w, h)?;
    let union = tape.add(parea, tarea)?;
    let union = tape.sub(union, inter)?;

    let ex1 = tape.maximum(px1, tx1)?;
    let ex0 = tape.minimum(px0, tx0)?;
    let ew = tape.sub(ex1, ex0)?;
    let ey1 = tape.maximum(py1, ty1)?;
    let ey0 = tape.minimum(py0, ty0)?;
    let eh = tape.sub(ey1, ey0)?;
    let enclose = tape.mul(ew, eh)?;

    let iou = tape.div(inter, union)?;
    let gap = tape.sub(enclose, union)?;
    let pen = tape.div(gap, enclose)?;
    tape.sub(iou, pen)
}

/// Total loss `L = L_n + L_r + α·L_o`.
pub fn joint_loss(tape: &mut Tape, l_n: Var, l_r: Var, l_o: Var, alpha: f64) -> Result<Var> {
    for (name, v) in [("L_n", l_n), ("L_r", l_r), ("L_o", l_o)] {
        let x = tape.value(v).item();
        if !x.is_finite() {
            return Err(Error::Divergence(format!("{name} = {x}")));
        }
    }
    let s = tape.add(l_n, l_r)?;
    let o = tape.scale(l_o, alpha);
    tape.add(s, o)
}

/// Loss settings and the two ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Pseudo-unknowns per image.
    pub k_u: usize,
    /// Weight of `L_o` in the total loss.
    pub alpha: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub cost: CostWeights,
    pub box_l1: f64,
    pub box_giou: f64,
    pub window: WindowRule,
    /// Train the unknown class on pseudo-labels.
    pub novelty: bool,
    /// Train the objectness branch.
    pub objectness: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            k_u: 5,
            alpha: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            cost: CostWeights::default(),
            box_l1: 5.0,
            box_giou: 2.0,
            window: WindowRule::CenterInclusion,
            novelty: true,
            objectness: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::config("focal_gamma", "must be >= 0"));
        }
        if !(self.focal_alpha > 0.0) {
            return Err(Error::config("focal_alpha", "must be > 0"));
        }
        Ok(())
    }
}

/// One image's loss and its bookkeeping.
#[derive(Clone, Debug)]
pub struct ImageLoss {
    pub total: Var,
    pub l_n: f64,
    pub l_r: f64,
    pub l_o: f64,
    pub matching: MatchResult,
    pub pseudo: PseudoLabelSet,
    pub targets: TrainingTargets,
}

/// Match, pseudo-label, build targets and assemble the total loss for one forward pass.
pub fn image_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    gts: &[Instance],
    known: &[u32],
    cfg: &LossConfig,
) -> Result<ImageLoss> {
    let logits = tape.value(out.heads.class_logits).clone();
    let boxes = tape.value(out.heads.boxes).clone();
    let m = logits.rows_cols().0;
    let cost = build_cost_matrix(&logits, &boxes, gts, known, &cfg.cost)?;
    let matching = hungarian_assign(&cost)?;
    let pseudo = if cfg.novelty || cfg.objectness {
        select_pseudo_unknowns(&boxes, &matching, &out.attention, cfg.k_u, cfg.window)
    } else {
        PseudoLabelSet::default()
    };
    let mut targets = build_training_targets(m, &matching, gts, known, &pseudo)?;
    if !cfg.novelty {
        for &q in &pseudo.queries {
            targets.class[q] = None;
        }
    }
    let width = logits.rows_cols().1;
    let l_n = focal_loss(
        tape,
        out.heads.class_logits,
        &targets.class_matrix(width),
        cfg.focal_gamma,
        cfg.focal_alpha,
    )?;
    let pairs: Vec<(usize, BoundingBox)> = matching.pairs.iter().map(|&(q, g)| (q, gts[g].bbox)).collect();
    let l_r = l1_box_loss(tape, out.heads.boxes, &pairs, cfg.box_l1, cfg.box_giou)?.total;
    let l_o = if cfg.objectness {
        focal_loss(
            tape,
            out.heads.objectness_logits,
            &targets.objectness_column(),
            cfg.focal_gamma,
            cfg.focal_alpha,
        )?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let total = joint_loss(tape, l_n, l_r, l_o, cfg.alpha)?;
    Ok(ImageLoss {
        total,
        l_n: tape.value(l_n).item(),
        l_r: tape.value(l_r).item(),
        l_o: tape.value(l_o).item(),
        matching,
        pseudo,
        targets,
    })
}

#[cfg(test)]
mod tests;
