//! Bipartite matching of object queries to known ground-truth instances.

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Instance, UNKNOWN_LABEL};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};

/// Predicted boxes narrower than this are widened before GIoU.
pub const MIN_BOX_SIDE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// GIoU of two center-format boxes given as `[cx, cy, w, h]`. Assumes positive sides.
pub fn giou_cxcywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a[0] - a[2] / 2.0, a[1] - a[3] / 2.0, a[0] + a[2] / 2.0, a[1] + a[3] / 2.0);
    let (bx0, by0, bx1, by1) = (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let enclose = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    inter / union - (enclose - union) / enclose
}

pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if !(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0) {
        return Err(Error::contract(format!("giou of zero-area box: {a:?}, {b:?}")));
    }
    Ok(giou_cxcywh([a.cx, a.cy, a.w, a.h], [b.cx, b.cy, b.w, b.h]))
}

/// Row-major `M×K` cost matrix; `K` may be zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "cost matrix {rows}×{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Classifier column of `label` when `known` lists the known classes in column order.
pub fn class_column(known: &[u32], label: u32) -> Option<usize> {
    if label == UNKNOWN_LABEL {
        return None;
    }
    known.iter().position(|&c| c == label).map(|i| i + 1)
}

/// Query-to-GT matching cost from class logits `[M×(1+|K|)]` and boxes `[M×4]`.
pub fn build_cost_matrix(
    logits: &Tensor,
    boxes: &Tensor,
    gts: &[Instance],
    known: &[u32],
    w: &CostWeights,
) -> Result<CostMatrix> {
    let (m, width) = logits.rows_cols();
    if boxes.shape() != [m, 4] {
        return Err(Error::dim(format!(
            "boxes {:?} for {m} queries",
            boxes.shape()
        )));
    }
    if width != known.len() + 1 {
        return Err(Error::dim(format!(
            "logits have {width} columns for {} known classes",
            known.len()
        )));
    }
    let cols: Vec<usize> = gts
        .iter()
        .map(|g| {
            class_column(known, g.label).ok_or_else(|| {
                Error::contract(format!("ground truth label {} is not a known class", g.label))
            })
        })
        .collect::<Result<_>>()?;
    let k = gts.len();
    let mut data = Vec::with_capacity(m * k);
    for i in 0..m {
        let b = boxes.row(i);
        let pred = [b[0], b[1], b[2].max(MIN_BOX_SIDE), b[3].max(MIN_BOX_SIDE)];
        for (g, &c) in gts.iter().zip(&cols) {
            let t = [g.bbox.cx, g.bbox.cy, g.bbox.w, g.bbox.h];
            let l1: f64 = b.iter().zip(&t).map(|(p, q)| (p - q).abs()).sum();
            let cls = -sigmoid(logits.row(i)[c]);
            data.push(w.class * cls + w.l1 * l1 + w.giou * (1.0 - giou_cxcywh(pred, t)));
        }
    }
    CostMatrix::new(m, k, data)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query, gt)` pairs, ordered by gt index.
    pub pairs: Vec<(usize, usize)>,
    /// Queries without a GT, ascending.
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.get(q, g)).sum()
    }

    pub fn matched_queries(&self) -> Vec<usize> {
        let mut q: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        q.sort_unstable();
        q
    }
}

/// Minimum-cost assignment of every GT column to a distinct query row.
///
/// Shortest augmenting paths with potentials, O(K²·M). Scans queries in index
/// order with strict comparisons, so ties resolve toward lower query indices.
pub fn hungarian_assign(cost: &CostMatrix) -> Result<MatchResult> {
    let (m, k) = (cost.rows, cost.cols);
    if k > m {
        return Err(Error::Capacity { gts: k, queries: m });
    }
    if let Some(v) = cost.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::contract(format!("non-finite matching cost {v}")));
    }
    // Rows of the working problem are GTs (1-based), columns are queries (1-based).
    let a = |g: usize, q: usize| cost.get(q - 1, g - 1);
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for g in 1..=k {
        owner[0] = g;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(k);
    let mut unmatched = Vec::with_capacity(m - k);
    for j in 1..=m {
        if owner[j] == 0 {
            unmatched.push(j - 1);
        } else {
            pairs.push((j - 1, owner[j] - 1));
        }
    }
    pairs.sort_by_key(|p| p.1);
    Ok(MatchResult {
        pairs,
        unmatched_queries: unmatched,
    })
}
