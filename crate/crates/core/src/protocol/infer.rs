use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EpisodeState;
use crate::data::{BoundingBox, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{bind, forward};
use crate::numerics::{sigmoid, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub top_k: usize,
    /// Keep the unknown column in the ranking. Off for the closed-set baseline.
    pub emit_unknown: bool,
    /// Multiply class scores by the objectness head's probability.
    pub score_fusion: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            top_k: 50,
            emit_unknown: true,
            score_fusion: false,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::config("top_k", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: u32,
    pub score: f64,
    pub bbox: BoundingBox,
}

/// Top-k detections of one image, score non-increasing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

/// Global top-`k` over a flattened `M×C` score matrix as `(query, column)` pairs.
///
/// Sorted by score descending; equal scores keep row-major order. Only columns `first_col..` compete.
pub fn topk_entries(scores: &Tensor, k: usize, first_col: usize) -> Vec<(usize, usize)> {
    let (m, c) = scores.rows_cols();
    let data = scores.data();
    let mut flat: Vec<usize> = (0..m * c).filter(|i| i % c >= first_col).collect();
    flat.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
    flat.truncate(k);
    flat.into_iter().map(|i| (i / c, i % c)).collect()
}

fn to_box(row: &[f64]) -> BoundingBox {
    let side = |x: f64| x.clamp(f64::MIN_POSITIVE, 1.0);
    BoundingBox {
        cx: row[0].clamp(0.0, 1.0),
        cy: row[1].clamp(0.0, 1.0),
        w: side(row[2]),
        h: side(row[3]),
    }
}

/// Forward pass plus top-k extraction over `M×(1+|K|)` class scores.
pub fn infer(state: &EpisodeState, pixels: &Tensor, image_id: u64, cfg: &InferConfig) -> Result<DetectionSet> {
    let mut tape = Tape::new();
    let bound = bind(&state.params, &mut tape, false);
    let out = forward(&mut tape, &bound, &state.model, pixels, state.labels.known().len())?;
    let mut scores = tape.value(out.heads.class_logits).map(sigmoid);
    if cfg.score_fusion {
        let obj = tape.value(out.heads.objectness);
        let c = scores.rows_cols().1;
        for (i, s) in scores.data_mut().iter_mut().enumerate() {
            *s *= obj.data()[i / c];
        }
    }
    let boxes = tape.value(out.heads.boxes);
    let first_col = usize::from(!cfg.emit_unknown);
    let detections = topk_entries(&scores, cfg.top_k, first_col)
        .into_iter()
        .map(|(q, col)| Detection {
            label: state.labels.label_of(col),
            score: scores.data()[q * scores.rows_cols().1 + col],
            bbox: to_box(boxes.row(q)),
        })
        .collect();
    Ok(DetectionSet { image_id, detections })
}

/// Inference over many images in parallel; output order follows `images`.
pub fn infer_all(state: &EpisodeState, images: &[LabeledImage], cfg: &InferConfig) -> Result<Vec<DetectionSet>> {
    cfg.validate()?;
    images
        .par_iter()
        .map(|img| infer(state, &img.pixels, img.image_id, cfg))
        .collect()
}
