//! OWOD evaluation: per-class AP, U-Recall, Wilderness Impact and A-OSE at a single IoU threshold.

mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use io::{detections_from_str, detections_to_string, load_detections, save_detections, truths_from_manifest};

use crate::data::{Instance, LabeledImage, UNKNOWN_LABEL};
use crate::error::{Error, Result};
use crate::protocol::{Detection, DetectionSet};

pub const IOU_THRESHOLD: f64 = 0.5;

/// Ground-truth instances of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTruth {
    pub image_id: u64,
    pub instances: Vec<Instance>,
}

impl From<&LabeledImage> for ImageTruth {
    fn from(img: &LabeledImage) -> Self {
        ImageTruth {
            image_id: img.image_id,
            instances: img.instances.clone(),
        }
    }
}

/// Per-detection TP flags and per-GT matched flags.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchFlags {
    pub tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching in score order against unmatched GT of the same label.
///
/// Among unmatched same-label GT the highest IoU wins, the lower index on ties.
pub fn match_greedy(dets: &[Detection], gts: &[Instance], iou_thresh: f64) -> Result<MatchFlags> {
    if dets.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(Error::contract("detections must be sorted by score, highest first"));
    }
    let mut gt_matched = vec![false; gts.len()];
    let tp = dets
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if gt_matched[g] || gt.label != d.label {
                    continue;
                }
                let iou = d.bbox.iou(&gt.bbox);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if iou >= iou_thresh => {
                    gt_matched[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    Ok(MatchFlags { tp, gt_matched })
}

/// All-point interpolated AP from `(score, is_tp)` pairs.
///
/// Pairs are ranked by score; equal scores keep their input order.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    for i in order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .fold(0.0, |a, x| a + x)
}

/// Matched unknown GT over all unknown GT, or `None` without unknown GT.
pub fn unknown_recall(dets: &[DetectionSet], gts: &[ImageTruth]) -> Result<Option<f64>> {
    let by_id = index_detections(dets);
    let (mut total, mut hit) = (0usize, 0usize);
    for img in gts {
        let flags = match_greedy(by_id.get(&img.image_id).copied().unwrap_or(&[]), &img.instances, IOU_THRESHOLD)?;
        for (gt, m) in img.instances.iter().zip(&flags.gt_matched) {
            if gt.label == UNKNOWN_LABEL {
                total += 1;
                hit += usize::from(*m);
            }
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

/// Wilderness Impact, or the reason it is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WildernessImpact {
    Value(f64),
    Unreachable(String),
}

fn overlaps_unknown(d: &Detection, gts: &[Instance], iou_thresh: f64) -> bool {
    gts.iter()
        .any(|g| g.label == UNKNOWN_LABEL && d.bbox.iou(&g.bbox) >= iou_thresh)
}

/// 1-based rank at which recall first reaches `level`.
fn rank_at_recall(ranked: &[bool], n_gt: usize, level: f64) -> Option<usize> {
    let need = ((level * n_gt as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut tp = 0usize;
    for (i, &t) in ranked.iter().enumerate() {
        tp += usize::from(t);
        if tp >= need {
            return Some(i + 1);
        }
    }
    None
}

/// `P_K / P_{K∪U} − 1` from the two precisions.
pub fn wi_from_precisions(p_k: f64, p_ku: f64) -> f64 {
    p_k / p_ku - 1.0
}

/// `WI = P_K / P_{K∪U} − 1` over known-class detections pooled across classes.
///
/// `P_K` ignores known-class detections that overlap an unknown GT; `P_{K∪U}` counts them as false positives.
/// Both are read where recall first reaches `recall_level`, so they share a TP count and the ratio
/// reduces to a ratio of ranks.
pub fn wilderness_impact(dets: &[DetectionSet], gts: &[ImageTruth], recall_level: f64) -> Result<WildernessImpact> {
    let by_id = index_detections(dets);
    let mut pooled: Vec<(f64, bool, bool)> = Vec::new();
    let mut n_known = 0usize;
    for img in gts {
        let list = by_id.get(&img.image_id).copied().unwrap_or(&[]);
        let flags = match_greedy(list, &img.instances, IOU_THRESHOLD)?;
        n_known += img.instances.iter().filter(|g| g.label != UNKNOWN_LABEL).count();
        for (d, &tp) in list.iter().zip(&flags.tp) {
            if d.label != UNKNOWN_LABEL {
                let wild = !tp && overlaps_unknown(d, &img.instances, IOU_THRESHOLD);
                pooled.push((d.score, tp, wild));
            }
        }
    }
    if n_known == 0 {
        return Ok(WildernessImpact::Unreachable("no known ground truth".into()));
    }
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[b].0.total_cmp(&pooled[a].0));
    let open: Vec<bool> = order.iter().map(|&i| pooled[i].1).collect();
    let closed: Vec<bool> = order.iter().filter(|&&i| !pooled[i].2).map(|&i| pooled[i].1).collect();
    match (
        rank_at_recall(&closed, n_known, recall_level),
        rank_at_recall(&open, n_known, recall_level),
    ) {
        (Some(rk), Some(rku)) => Ok(WildernessImpact::Value((rku - rk) as f64 / rk as f64)),
        _ => Ok(WildernessImpact::Unreachable(format!(
            "known recall never reaches {recall_level}"
        ))),
    }
}

/// How A-OSE counts confusions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AoseMode {
    /// Unknown GT instances hit by at least one known-class detection.
    #[default]
    Instances,
    /// Known-class detections that hit any unknown GT.
    Detections,
}

pub fn a_ose(dets: &[DetectionSet], gts: &[ImageTruth], mode: AoseMode) -> u64 {
    let by_id = index_detections(dets);
    let mut count = 0u64;
    for img in gts {
        let known_dets: Vec<&Detection> = by_id
            .get(&img.image_id)
            .copied()
            .unwrap_or(&[])
            .iter()
            .filter(|d| d.label != UNKNOWN_LABEL)
            .collect();
        count += match mode {
            AoseMode::Instances => img
                .instances
                .iter()
                .filter(|g| {
                    g.label == UNKNOWN_LABEL && known_dets.iter().any(|d| d.bbox.iou(&g.bbox) >= IOU_THRESHOLD)
                })
                .count() as u64,
            AoseMode::Detections => known_dets
                .iter()
                .filter(|d| overlaps_unknown(d, &img.instances, IOU_THRESHOLD))
                .count() as u64,
        };
    }
    count
}

fn index_detections(dets: &[DetectionSet]) -> BTreeMap<u64, &[Detection]> {
    dets.iter().map(|d| (d.image_id, d.detections.as_slice())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub wi_recall: f64,
    pub a_ose_mode: AoseMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            wi_recall: 0.8,
            a_ose_mode: AoseMode::Instances,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.wi_recall > 0.0 && self.wi_recall <= 1.0) {
            return Err(Error::config("eval.wi_recall", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// 1-based task the report belongs to.
    pub task: usize,
    pub ap: BTreeMap<u32, f64>,
    pub map_previous: Option<f64>,
    pub map_current: Option<f64>,
    pub map_both: Option<f64>,
    pub u_recall: Option<f64>,
    pub wi: Option<f64>,
    /// Why `wi` is absent when unknown GT exist.
    pub wi_note: Option<String>,
    pub a_ose: Option<u64>,
    pub images: usize,
    /// Ground-truth counts per evaluated label, unknown as 0.
    pub gt_per_class: BTreeMap<u32, usize>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().fold(0.0, |a, x| a + x) / v.len() as f64)
}

/// Aggregates all metrics; GT labels outside `previous ∪ current` are evaluated as unknown.
pub fn evaluate(
    task: usize,
    dets: &[DetectionSet],
    truths: &[ImageTruth],
    previous: &[u32],
    current: &[u32],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let known: BTreeSet<u32> = previous.iter().chain(current).copied().collect();
    if known.len() != previous.len() + current.len() || known.contains(&UNKNOWN_LABEL) {
        return Err(Error::contract("previous and current class sets must be disjoint known labels"));
    }
    let gts: Vec<ImageTruth> = truths
        .iter()
        .map(|t| ImageTruth {
            image_id: t.image_id,
            instances: t
                .instances
                .iter()
                .map(|i| Instance {
                    label: if known.contains(&i.label) { i.label } else { UNKNOWN_LABEL },
                    ..*i
                })
                .collect(),
        })
        .collect();
    let by_id = index_detections(dets);
    let mut scored: BTreeMap<u32, Vec<(f64, bool)>> = BTreeMap::new();
    let mut gt_per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for img in &gts {
        let list = by_id.get(&img.image_id).copied().unwrap_or(&[]);
        if let Some(d) = list.iter().find(|d| d.label != UNKNOWN_LABEL && !known.contains(&d.label)) {
            return Err(Error::contract(format!("detection label {} is not known", d.label)));
        }
        let flags = match_greedy(list, &img.instances, IOU_THRESHOLD)?;
        for (d, &tp) in list.iter().zip(&flags.tp) {
            scored.entry(d.label).or_default().push((d.score, tp));
        }
        for g in &img.instances {
            *gt_per_class.entry(g.label).or_default() += 1;
        }
    }
    let ap: BTreeMap<u32, f64> = known
        .iter()
        .map(|&c| {
            let n = gt_per_class.get(&c).copied().unwrap_or(0);
            (c, average_precision(scored.get(&c).map_or(&[][..], Vec::as_slice), n))
        })
        .collect();
    let group = |cs: &[u32]| mean(cs.iter().map(|c| ap[c]));
    let has_unknown = gt_per_class.contains_key(&UNKNOWN_LABEL);
    let (wi, wi_note) = if has_unknown {
        match wilderness_impact(dets, &gts, cfg.wi_recall)? {
            WildernessImpact::Value(v) => (Some(v), None),
            WildernessImpact::Unreachable(why) => (None, Some(why)),
        }
    } else {
        (None, None)
    };
    Ok(EvalReport {
        task,
        map_previous: group(previous),
        map_current: group(current),
        map_both: mean(ap.values().copied()),
        ap,
        u_recall: unknown_recall(dets, &gts)?,
        wi,
        wi_note,
        a_ose: has_unknown.then(|| a_ose(dets, &gts, cfg.a_ose_mode)),
        images: gts.len(),
        gt_per_class,
    })
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: "eval report".into(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Human-readable summary, percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task {}  images {}", self.task, self.images);
        let _ = writeln!(s, "mAP previous  {}", pct(self.map_previous));
        let _ = writeln!(s, "mAP current   {}", pct(self.map_current));
        let _ = writeln!(s, "mAP both      {}", pct(self.map_both));
        let _ = writeln!(s, "U-Recall      {}", pct(self.u_recall));
        match (&self.wi, &self.wi_note) {
            (Some(v), _) => {
                let _ = writeln!(s, "WI            {v:.6}");
            }
            (None, Some(why)) => {
                let _ = writeln!(s, "WI            - ({why})");
            }
            (None, None) => {
                let _ = writeln!(s, "WI            -");
            }
        }
        let _ = writeln!(s, "A-OSE         {}", self.a_ose.map_or_else(|| "-".into(), |v| v.to_string()));
        for (c, ap) in &self.ap {
            let _ = writeln!(
                s,
                "AP[{c}]        {}  (gt {})",
                pct(Some(*ap)),
                self.gt_per_class.get(c).unwrap_or(&0)
            );
        }
        s
    }
}
