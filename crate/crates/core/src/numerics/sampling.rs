//! Bilinear reads on feature grids and the multi-scale deformable sampling kernel.
//!
//! Grid coordinates: cell `(row i, col j)` has its center at `(x = j, y = i)`.
//! Reads outside `[0, H) × [0, W)` contribute zero.

/// The four corner taps of one bilinear read.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub idx: [Option<usize>; 4],
    pub w: [f64; 4],
    pub dx: [f64; 4],
    pub dy: [f64; 4],
}

pub(crate) fn taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let corner = |cx: f64, cy: f64| -> Option<usize> {
        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            None
        } else {
            Some(cy as usize * w + cx as usize)
        }
    };
    Taps {
        idx: [
            corner(x0, y0),
            corner(x0 + 1.0, y0),
            corner(x0, y0 + 1.0),
            corner(x0 + 1.0, y0 + 1.0),
        ],
        w: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        dx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        dy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
    }
}

/// `feature[C×H×W]`, `points[P×2]` → `[P×C]`.
pub(crate) fn bilinear_forward(
    feature: &[f64],
    c: usize,
    h: usize,
    w: usize,
    points: &[f64],
) -> Vec<f64> {
    let p = points.len() / 2;
    let hw = h * w;
    let mut out = vec![0.0; p * c];
    for pi in 0..p {
        let t = taps(points[2 * pi], points[2 * pi + 1], h, w);
        for k in 0..4 {
            if let Some(idx) = t.idx[k] {
                for ch in 0..c {
                    out[pi * c + ch] += t.w[k] * feature[ch * hw + idx];
                }
            }
        }
    }
    out
}

/// Returns `(d feature, d points)`.
pub(crate) fn bilinear_backward(
    feature: &[f64],
    c: usize,
    h: usize,
    w: usize,
    points: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let p = points.len() / 2;
    let hw = h * w;
    let mut gf = vec![0.0; feature.len()];
    let mut gp = vec![0.0; points.len()];
    for pi in 0..p {
        let t = taps(points[2 * pi], points[2 * pi + 1], h, w);
        let grow = &g[pi * c..(pi + 1) * c];
        for k in 0..4 {
            if let Some(idx) = t.idx[k] {
                let mut dot = 0.0;
                for ch in 0..c {
                    gf[ch * hw + idx] += t.w[k] * grow[ch];
                    dot += grow[ch] * feature[ch * hw + idx];
                }
                gp[2 * pi] += t.dx[k] * dot;
                gp[2 * pi + 1] += t.dy[k] * dot;
            }
        }
    }
    (gf, gp)
}

/// Layout of a flattened multi-scale value tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MsdaLayout {
    pub heads: usize,
    pub points: usize,
    /// `(h, w)` per level.
    pub levels: Vec<(usize, usize)>,
}

impl MsdaLayout {
    pub fn tokens(&self) -> usize {
        self.levels.iter().map(|(h, w)| h * w).sum()
    }

    pub fn level_starts(&self) -> Vec<usize> {
        let mut acc = 0;
        self.levels
            .iter()
            .map(|(h, w)| {
                let s = acc;
                acc += h * w;
                s
            })
            .collect()
    }

    /// Sampling points per query per head (`L·P`).
    pub fn samples_per_head(&self) -> usize {
        self.levels.len() * self.points
    }

    pub(crate) fn location(&self, refs: &[f64], offsets: &[f64], q: usize, h: usize, l: usize, p: usize) -> (f64, f64) {
        let (lh, lw) = self.levels[l];
        let per_q = self.heads * self.samples_per_head() * 2;
        let o = q * per_q + ((h * self.levels.len() + l) * self.points + p) * 2;
        (
            refs[2 * q] * lw as f64 - 0.5 + offsets[o],
            refs[2 * q + 1] * lh as f64 - 0.5 + offsets[o + 1],
        )
    }
}

/// `value[N×D]`, `refs[Q×2]` (normalized), `offsets[Q×(H·L·P·2)]` (cell units),
/// `weights[Q×(H·L·P)]` → `[Q×D]`.
pub(crate) fn msda_forward(
    layout: &MsdaLayout,
    value: &[f64],
    d: usize,
    refs: &[f64],
    offsets: &[f64],
    weights: &[f64],
) -> Vec<f64> {
    let q_n = refs.len() / 2;
    let dh = d / layout.heads;
    let lp = layout.samples_per_head();
    let starts = layout.level_starts();
    let mut out = vec![0.0; q_n * d];
    for q in 0..q_n {
        for h in 0..layout.heads {
            let orow = &mut out[q * d + h * dh..q * d + (h + 1) * dh];
            for (l, &(lh, lw)) in layout.levels.iter().enumerate() {
                for p in 0..layout.points {
                    let a = weights[q * layout.heads * lp + h * lp + l * layout.points + p];
                    let (x, y) = layout.location(refs, offsets, q, h, l, p);
                    let t = taps(x, y, lh, lw);
                    for k in 0..4 {
                        if let Some(idx) = t.idx[k] {
                            let row = starts[l] + idx;
                            let coef = a * t.w[k];
                            let vrow = &value[row * d + h * dh..row * d + (h + 1) * dh];
                            for (o, v) in orow.iter_mut().zip(vrow) {
                                *o += coef * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct MsdaGrads {
    pub value: Vec<f64>,
    pub refs: Vec<f64>,
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
}

pub(crate) fn msda_backward(
    layout: &MsdaLayout,
    value: &[f64],
    d: usize,
    refs: &[f64],
    offsets: &[f64],
    weights: &[f64],
    g: &[f64],
) -> MsdaGrads {
    let q_n = refs.len() / 2;
    let dh = d / layout.heads;
    let lp = layout.samples_per_head();
    let starts = layout.level_starts();
    let mut grads = MsdaGrads {
        value: vec![0.0; value.len()],
        refs: vec![0.0; refs.len()],
        offsets: vec![0.0; offsets.len()],
        weights: vec![0.0; weights.len()],
    };
    let per_q = layout.heads * lp * 2;
    for q in 0..q_n {
        for h in 0..layout.heads {
            let grow = &g[q * d + h * dh..q * d + (h + 1) * dh];
            for (l, &(lh, lw)) in layout.levels.iter().enumerate() {
                for p in 0..layout.points {
                    let wi = q * layout.heads * lp + h * lp + l * layout.points + p;
                    let a = weights[wi];
                    let (x, y) = layout.location(refs, offsets, q, h, l, p);
                    let t = taps(x, y, lh, lw);
                    let mut ga = 0.0;
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for k in 0..4 {
                        if let Some(idx) = t.idx[k] {
                            let row = starts[l] + idx;
                            let base = row * d + h * dh;
                            let vrow = &value[base..base + dh];
                            let dot: f64 = grow.iter().zip(vrow).map(|(g, v)| g * v).sum();
                            ga += t.w[k] * dot;
                            gx += a * t.dx[k] * dot;
                            gy += a * t.dy[k] * dot;
                            let coef = a * t.w[k];
                            for (gv, gg) in grads.value[base..base + dh].iter_mut().zip(grow) {
                                *gv += coef * gg;
                            }
                        }
                    }
                    grads.weights[wi] += ga;
                    let o = q * per_q + ((h * layout.levels.len() + l) * layout.points + p) * 2;
                    grads.offsets[o] += gx;
                    grads.offsets[o + 1] += gy;
                    grads.refs[2 * q] += gx * lw as f64;
                    grads.refs[2 * q + 1] += gy * lh as f64;
                }
            }
        }
    }
    grads
}
