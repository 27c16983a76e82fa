//! Reduced deformable-DETR detector with novelty, objectness and box heads.

mod params;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use params::{bind, Bound, Params};

use crate::error::{Error, Result};
use crate::numerics::{MsdaLayout, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width `D`.
    pub d: usize,
    /// Number of object queries `M`.
    pub m: usize,
    /// Feature levels `L`.
    pub levels: usize,
    /// Sampling points per level per head.
    pub points: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    /// Channel count `D'` of every backbone conv stage.
    pub backbone_width: usize,
    /// Backbone stage feeding the attention map; stage `s` has stride `2^(s+1)`.
    pub attention_stage: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            m: 20,
            levels: 2,
            points: 4,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 64,
            backbone_width: 16,
            attention_stage: 1,
        }
    }
}

impl ModelConfig {
    /// Full-scale widths, far too slow for the desk engine.
    pub fn full_scale() -> Self {
        ModelConfig {
            d: 256,
            m: 100,
            levels: 4,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            ffn: 1024,
            backbone_width: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d", self.d),
            ("model.m", self.m),
            ("model.levels", self.levels),
            ("model.points", self.points),
            ("model.heads", self.heads),
            ("model.ffn", self.ffn),
            ("model.backbone_width", self.backbone_width),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*key, "must be positive"));
        }
        if self.d % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("d = {} is not divisible by heads = {}", self.d, self.heads),
            ));
        }
        if self.d % 2 != 0 {
            return Err(Error::config("model.d", "must be even"));
        }
        if self.attention_stage > self.levels {
            return Err(Error::config(
                "model.attention_stage",
                format!("stage {} does not exist (0..={})", self.attention_stage, self.levels),
            ));
        }
        Ok(())
    }

    /// Smallest image side the backbone accepts: the coarsest level must keep one cell.
    pub fn min_input_side(&self) -> usize {
        1 << (self.levels + 1)
    }

    pub(crate) fn samples_per_query(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

/// Per-level `D×h×w` feature maps, finest first.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub levels: Vec<Var>,
    pub shapes: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `M×(1+n_known)`, column 0 is the unknown class.
    pub class_logits: Var,
    /// Pre-sigmoid objectness, `M×1`.
    pub objectness_logits: Var,
    /// `M`-vector in `(0,1)`.
    pub objectness: Var,
    /// `M×4` normalized `cx, cy, w, h`.
    pub boxes: Var,
}

/// Decoder output.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// Query embeddings `q_e[M×D]`.
    pub embeddings: Var,
    /// Reference points `[M×2]` in `(0,1)`.
    pub refs: Var,
    /// Pre-sigmoid reference points.
    pub ref_logits: Var,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub heads: HeadOutputs,
    pub query_embeddings: Var,
    pub reference_points: Var,
    /// Attention map `A` (channel mean of the configured backbone stage).
    pub attention: Tensor,
}

fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn layer_norm(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn ffn(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{name}.fc1"), x)?;
    let h = tape.relu(h);
    linear(tape, p, &format!("{name}.fc2"), h)
}

/// Strided 3×3 conv stages with ReLU, each level projected to `D` by a 1×1 conv.
///
/// Returns the projected levels and the raw (post-ReLU) map of `cfg.attention_stage`.
pub fn backbone_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    pixels: Var,
) -> Result<(MultiScaleFeatures, Var)> {
    let (h, w) = match tape.shape(pixels) {
        [3, h, w] => (*h, *w),
        s => return Err(Error::dim(format!("backbone expects 3×H×W pixels, got {s:?}"))),
    };
    let min = cfg.min_input_side();
    if h < min || w < min {
        return Err(Error::dim(format!(
            "input {h}×{w} too small: {} levels need at least {min}×{min}",
            cfg.levels
        )));
    }
    let mut x = pixels;
    let mut stages = Vec::with_capacity(cfg.levels + 1);
    for s in 0..=cfg.levels {
        let wv = p.get(&format!("backbone.conv{s}.w"))?;
        let bv = p.get(&format!("backbone.conv{s}.b"))?;
        let y = tape.conv2d(x, wv, Some(bv), 2, 1)?;
        x = tape.relu(y);
        stages.push(x);
    }
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut shapes = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let wv = p.get(&format!("backbone.proj{l}.w"))?;
        let bv = p.get(&format!("backbone.proj{l}.b"))?;
        let f = tape.conv2d(stages[l + 1], wv, Some(bv), 1, 0)?;
        let s = tape.shape(f);
        shapes.push((s[1], s[2]));
        levels.push(f);
    }
    Ok((MultiScaleFeatures { levels, shapes }, stages[cfg.attention_stage]))
}

/// `A[i,j]` = mean over channels of `raw[:, i, j]`.
pub fn attention_map(raw: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match raw.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim(format!("attention_map expects C×H×W, got {s:?}"))),
    };
    let data = raw.data();
    Ok(Tensor::from_fn(&[h, w], |i| {
        (0..c).map(|k| data[k * h * w + i]).sum::<f64>() / c as f64
    }))
}

/// Fixed sinusoidal encoding of normalized cell centers, `(h·w)×D`.
pub fn position_encoding(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    Tensor::from_fn(&[h * w, d], |idx| {
        let (cell, c) = (idx / d, idx % d);
        let (i, j) = (cell / w, cell % w);
        let (pos, k) = if c < half {
            ((i as f64 + 0.5) / h as f64, c)
        } else {
            ((j as f64 + 0.5) / w as f64, c - half)
        };
        let freq = 10000f64.powf((k / 2 * 2) as f64 / half as f64);
        let a = pos * 2.0 * PI / freq;
        if k % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Multi-scale deformable attention block named `name`.
///
/// `queries[Q×D]` produce sampling offsets and attention logits; `value_in[N×D]` is the
/// flattened multi-scale map described by `layout`.
pub fn ms_deform_attn(
    tape: &mut Tape,
    p: &Bound,
    name: &str,
    layout: &MsdaLayout,
    queries: Var,
    refs: Var,
    value_in: Var,
) -> Result<Var> {
    let q = tape.shape(queries)[0];
    let value = linear(tape, p, &format!("{name}.value"), value_in)?;
    let offsets = linear(tape, p, &format!("{name}.offsets"), queries)?;
    let logits = linear(tape, p, &format!("{name}.weights"), queries)?;
    let lp = layout.samples_per_head();
    let logits = tape.reshape(logits, &[q * layout.heads, lp])?;
    let weights = tape.softmax(logits);
    let weights = tape.reshape(weights, &[q, layout.heads * lp])?;
    let sampled = tape.msda(layout, value, refs, offsets, weights)?;
    linear(tape, p, &format!("{name}.out"), sampled)
}

fn self_attention(tape: &mut Tape, p: &Bound, name: &str, heads: usize, x: Var) -> Result<Var> {
    let d = tape.shape(x)[1];
    let dh = d / heads;
    let q = linear(tape, p, &format!("{name}.q"), x)?;
    let k = linear(tape, p, &format!("{name}.k"), x)?;
    let v = linear(tape, p, &format!("{name}.v"), x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax(s);
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, p, &format!("{name}.out"), cat)
}

fn token_refs(shapes: &[(usize, usize)]) -> Tensor {
    let mut data = Vec::new();
    for &(h, w) in shapes {
        for i in 0..h {
            for j in 0..w {
                data.push((j as f64 + 0.5) / w as f64);
                data.push((i as f64 + 0.5) / h as f64);
            }
        }
    }
    let n = data.len() / 2;
    Tensor::new(&[n, 2], data).expect("token grid")
}

/// Encoder over flattened features, then decoder over the learnable queries.
///
/// Returns the query embeddings `q_e[M×D]`, reference points `[M×2]` and their logits.
pub fn transformer_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    feats: &MultiScaleFeatures,
) -> Result<Decoded> {
    let layout = MsdaLayout {
        heads: cfg.heads,
        points: cfg.points,
        levels: feats.shapes.clone(),
    };
    let level_embed = p.get("encoder.level_embed")?;
    let mut tokens = Vec::with_capacity(feats.levels.len());
    let mut pos = Vec::with_capacity(feats.levels.len());
    for (l, (&f, &(h, w))) in feats.levels.iter().zip(&feats.shapes).enumerate() {
        let flat = tape.reshape(f, &[cfg.d, h * w])?;
        tokens.push(tape.transpose(flat)?);
        let sin = tape.constant(position_encoding(h, w, cfg.d));
        let lvl = tape.gather_rows(level_embed, &[l])?;
        let lvl = tape.reshape(lvl, &[cfg.d])?;
        pos.push(tape.add(sin, lvl)?);
    }
    let mut memory = tape.concat_rows(&tokens)?;
    let pos = tape.concat_rows(&pos)?;
    let enc_refs = tape.constant(token_refs(&feats.shapes));
    for i in 0..cfg.enc_layers {
        let name = format!("encoder.{i}");
        let query = tape.add(memory, pos)?;
        let attn = ms_deform_attn(tape, p, &format!("{name}.attn"), &layout, query, enc_refs, memory)?;
        let x = tape.add(memory, attn)?;
        let x = layer_norm(tape, p, &format!("{name}.ln1"), x)?;
        let f = ffn(tape, p, &format!("{name}.ffn"), x)?;
        let x = tape.add(x, f)?;
        memory = layer_norm(tape, p, &format!("{name}.ln2"), x)?;
    }

    let queries = p.get("decoder.queries")?;
    let r = linear(tape, p, "decoder.ref", queries)?;
    let refs = tape.sigmoid(r);
    let mut x = queries;
    for i in 0..cfg.dec_layers {
        let name = format!("decoder.{i}");
        let sa = self_attention(tape, p, &format!("{name}.self"), cfg.heads, x)?;
        let y = tape.add(x, sa)?;
        let y = layer_norm(tape, p, &format!("{name}.ln1"), y)?;
        let ca = ms_deform_attn(tape, p, &format!("{name}.cross"), &layout, y, refs, memory)?;
        let y = tape.add(y, ca)?;
        let y = layer_norm(tape, p, &format!("{name}.ln2"), y)?;
        let f = ffn(tape, p, &format!("{name}.ffn"), y)?;
        let y = tape.add(y, f)?;
        x = layer_norm(tape, p, &format!("{name}.ln3"), y)?;
    }
    Ok(Decoded {
        embeddings: x,
        refs,
        ref_logits: r,
    })
}

/// Novelty classification, objectness and box heads on `q_e[M×D]`.
///
/// With `anchor_logits[M×2]`, the box center logits are offsets from the anchors.
pub fn heads_forward(
    tape: &mut Tape,
    p: &Bound,
    q_e: Var,
    n_known: usize,
    anchor_logits: Option<Var>,
) -> Result<HeadOutputs> {
    if n_known == 0 {
        return Err(Error::contract("heads need at least one known class"));
    }
    let class_logits = linear(tape, p, "head.cls", q_e)?;
    let width = tape.shape(class_logits)[1];
    if width != n_known + 1 {
        return Err(Error::dim(format!(
            "classifier has {width} outputs, expected 1 + {n_known}"
        )));
    }
    let objectness_logits = linear(tape, p, "head.obj", q_e)?;
    let m = tape.shape(q_e)[0];
    let o = tape.sigmoid(objectness_logits);
    let objectness = tape.reshape(o, &[m])?;

    let h = linear(tape, p, "head.box.fc1", q_e)?;
    let h = tape.relu(h);
    let h = linear(tape, p, "head.box.fc2", h)?;
    let h = tape.relu(h);
    let mut raw = linear(tape, p, "head.box.fc3", h)?;
    if let Some(a) = anchor_logits {
        let zeros = tape.constant(Tensor::zeros(&[m, 2]));
        let shift = tape.concat_cols(&[a, zeros])?;
        raw = tape.add(raw, shift)?;
    }
    let boxes = tape.sigmoid(raw);
    Ok(HeadOutputs {
        class_logits,
        objectness_logits,
        objectness,
        boxes,
    })
}

/// Full detector forward pass on one `3×H×W` image.
pub fn forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    pixels: &Tensor,
    n_known: usize,
) -> Result<ForwardOutput> {
    let x = tape.constant(pixels.clone());
    let (feats, raw) = backbone_forward(tape, p, cfg, x)?;
    let attention = attention_map(tape.value(raw))?;
    let dec = transformer_forward(tape, p, cfg, &feats)?;
    let heads = heads_forward(tape, p, dec.embeddings, n_known, Some(dec.ref_logits))?;
    Ok(ForwardOutput {
        heads,
        query_embeddings: dec.embeddings,
        reference_points: dec.refs,
        attention,
    })
}
