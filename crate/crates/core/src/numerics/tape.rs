//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value. Nodes whose inputs carry
//! no gradient are stored as constants, so the backward pass only visits the
//! part of the graph that reaches a `requires_grad` leaf.

use super::conv::{col2im, im2col, ConvGeom};
use super::linalg::{add_into, matmul, matmul_nt, matmul_tn, sigmoid, softplus, transpose};
use super::sampling::{bilinear_backward, bilinear_forward, msda_backward, msda_forward, MsdaLayout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Relu,
    Sigmoid,
    Abs,
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Bilinear {
        feature: Var,
        points: Var,
    },
    Msda {
        layout: MsdaLayout,
        value: Var,
        refs: Var,
        offsets: Var,
        weights: Var,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Focal {
        logits: Var,
        targets: Vec<f64>,
        gamma: f64,
        alpha: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if n.requires_grad {
                n.grad = Some(vec![0.0; n.value.numel()]);
            }
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.numel()]);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let out = transpose(self.value(a).data(), r, c);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), &[a]))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::dim(format!(
                "{kind:?}: shape {sb:?} does not broadcast onto {sa:?}"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let inner = bv.len();
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % inner];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                    Binary::Min => x.min(y),
                    Binary::Max => x.max(y),
                }
            })
            .collect();
        Ok(self.push(Tensor::new(&sa, out)?, Op::Binary(kind, a, b), &[a, b]))
    }

    /// Elementwise sum; `b` may repeat over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let out = self.value(a).map(|x| match kind {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Abs => x.abs(),
            Unary::Scale(c) => x * c,
            Unary::AddScalar(c) => x + c,
            Unary::ClampMin(c) => x.max(c),
        });
        self.push(out, Op::Unary(kind, a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), a)
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::ClampMin(c), a)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, n) = x.rows_cols();
        let mut out = x.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(x.shape(), out).expect("same shape");
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = xv.rows_cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim(format!(
                "layer_norm over width {n} got gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// `x[C×H×W]`, `w[O×C×k×k]`, optional bias `[O]`; zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim(format!("conv2d input must be C×H×W, got {s:?}"))),
        };
        let (o, ci, k) = match self.shape(w) {
            [o, ci, k1, k2] if k1 == k2 => (*o, *ci, *k1),
            s => return Err(Error::dim(format!("conv2d kernel must be O×C×k×k, got {s:?}"))),
        };
        if ci != c {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {:?}, kernel {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d kernel {k}×{k} larger than padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return Err(Error::dim(format!("conv2d bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            c_in: c,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = matmul(self.value(w).data(), &cols, o, c * k * k, oh * ow);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (oc, chunk) in out.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[oc]);
            }
        }
        let t = Tensor::new(&[o, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// Bilinear reads of `feature[C×H×W]` at `points[P×2]` (`x`, `y` grid coords) → `[P×C]`.
    pub fn bilinear_sample(&mut self, feature: Var, points: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(feature) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim(format!("bilinear_sample feature must be C×H×W, got {s:?}"))),
        };
        let p = match self.shape(points) {
            [p, 2] => *p,
            s => return Err(Error::dim(format!("bilinear_sample points must be P×2, got {s:?}"))),
        };
        let out = bilinear_forward(self.value(feature).data(), c, h, w, self.value(points).data());
        Ok(self.push(
            Tensor::new(&[p, c], out)?,
            Op::Bilinear { feature, points },
            &[feature, points],
        ))
    }

    /// Multi-scale deformable sampling core; see [`MsdaLayout`] for tensor layouts.
    pub fn msda(
        &mut self,
        layout: &MsdaLayout,
        value: Var,
        refs: Var,
        offsets: Var,
        weights: Var,
    ) -> Result<Var> {
        let (n, d) = self.matrix_dims(value, "msda value")?;
        let (q, two) = self.matrix_dims(refs, "msda refs")?;
        let hlp = layout.heads * layout.samples_per_head();
        if n != layout.tokens() || two != 2 || d % layout.heads != 0 {
            return Err(Error::dim(format!(
                "msda value {:?} / refs {:?} inconsistent with layout {layout:?}",
                self.shape(value),
                self.shape(refs)
            )));
        }
        if self.shape(offsets) != [q, hlp * 2] || self.shape(weights) != [q, hlp] {
            return Err(Error::dim(format!(
                "msda offsets {:?} / weights {:?}, expected [{q}, {}] / [{q}, {hlp}]",
                self.shape(offsets),
                self.shape(weights),
                hlp * 2
            )));
        }
        let out = msda_forward(
            layout,
            self.value(value).data(),
            d,
            self.value(refs).data(),
            self.value(offsets).data(),
            self.value(weights).data(),
        );
        Ok(self.push(
            Tensor::new(&[q, d], out)?,
            Op::Msda {
                layout: layout.clone(),
                value,
                refs,
                offsets,
                weights,
            },
            &[value, refs, offsets, weights],
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.rows_cols();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("gather_rows index {bad} out of {r} rows")));
        }
        if rows.is_empty() {
            return Err(Error::dim("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(x.row(i));
        }
        let t = Tensor::new(&[rows.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).rows_cols().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).rows_cols();
            if pc != c {
                return Err(Error::dim(format!(
                    "concat_rows width mismatch: {c} vs {:?}",
                    self.shape(p)
                )));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let t = Tensor::new(&[rows, c], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.rows_cols();
        if start + len > c || len == 0 {
            return Err(Error::dim(format!("slice_cols {start}..{} of width {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let t = Tensor::new(&[r, len], out)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).rows_cols();
            if pr != r {
                return Err(Error::dim(format!(
                    "concat_cols row mismatch: {r} vs {:?}",
                    self.shape(p)
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(&[r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Elementwise sigmoid focal loss against binary `targets` of the same shape.
    ///
    /// Positives are weighted by `alpha`, negatives by `1`, so `gamma = 0, alpha = 1`
    /// is plain binary cross-entropy.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: &Tensor, gamma: f64, alpha: f64) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(Error::dim(format!(
                "focal targets {:?} for logits {:?}",
                targets.shape(),
                x.shape()
            )));
        }
        let out: Vec<f64> = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| focal_value(z, t, gamma, alpha))
            .collect();
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.push(
            v,
            Op::Focal {
                logits,
                targets: targets.data().to_vec(),
                gamma,
                alpha,
            },
            &[logits],
        ))
    }

    /// Accumulates `d loss / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
            if node.requires_grad {
                leaf_grads.push((i, g));
            }
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.rows_cols();
                let n = bv.rows_cols().1;
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, &matmul_nt(g, bv.data(), m, n, k));
                }
                if let Some(s) = self.slot(adj, *b) {
                    add_into(s, &matmul_tn(av.data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).rows_cols();
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, &transpose(g, c, r));
                }
            }
            Op::Binary(kind, a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let inner = bv.len();
                if let Some(s) = self.slot(adj, *a) {
                    for (j, (sv, gv)) in s.iter_mut().zip(g).enumerate() {
                        let (x, y) = (av[j], bv[j % inner]);
                        *sv += gv * match kind {
                            Binary::Add | Binary::Sub => 1.0,
                            Binary::Mul => y,
                            Binary::Div => 1.0 / y,
                            Binary::Min => f64::from(u8::from(x <= y)),
                            Binary::Max => f64::from(u8::from(x >= y)),
                        };
                    }
                }
                if let Some(s) = self.slot(adj, *b) {
                    for (j, gv) in g.iter().enumerate() {
                        let (x, y) = (av[j], bv[j % inner]);
                        s[j % inner] += gv * match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => -1.0,
                            Binary::Mul => x,
                            Binary::Div => -x / (y * y),
                            Binary::Min => f64::from(u8::from(y < x)),
                            Binary::Max => f64::from(u8::from(y > x)),
                        };
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                if let Some(s) = self.slot(adj, *a) {
                    for j in 0..g.len() {
                        s[j] += g[j] * match kind {
                            Unary::Relu => f64::from(u8::from(x[j] > 0.0)),
                            Unary::Sigmoid => y[j] * (1.0 - y[j]),
                            Unary::Abs => {
                                if x[j] > 0.0 {
                                    1.0
                                } else if x[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Scale(c) => *c,
                            Unary::AddScalar(_) => 1.0,
                            Unary::ClampMin(c) => f64::from(u8::from(x[j] > *c)),
                        };
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (rows, n) = y.rows_cols();
                if let Some(s) = self.slot(adj, *a) {
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).numel();
                let rows = rstd.len();
                let gam = self.value(*gamma).data();
                if let Some(s) = self.slot(adj, *gamma) {
                    for r in 0..rows {
                        for j in 0..n {
                            s[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(s) = self.slot(adj, *beta) {
                    for r in 0..rows {
                        for j in 0..n {
                            s[j] += g[r * n + j];
                        }
                    }
                }
                if let Some(s) = self.slot(adj, *x) {
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[r * n + j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xhat[r * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = g[r * n + j] * gam[j];
                            s[r * n + j] += rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let wv = self.value(*w);
                let o = wv.shape()[0];
                let patch = geom.c_in * geom.k * geom.k;
                let (oh, ow) = geom.out_hw();
                let npix = oh * ow;
                if let Some(s) = self.slot(adj, *w) {
                    add_into(s, &matmul_nt(g, cols, o, npix, patch));
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(adj, *b) {
                        for (oc, chunk) in g.chunks(npix).enumerate() {
                            s[oc] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(s) = self.slot(adj, *x) {
                    let dcols = matmul_tn(wv.data(), g, o, patch, npix);
                    add_into(s, &col2im(&dcols, geom));
                }
            }
            Op::Bilinear { feature, points } => {
                let f = self.value(*feature);
                let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
                let (gf, gp) = bilinear_backward(f.data(), c, h, w, self.value(*points).data(), g);
                if let Some(s) = self.slot(adj, *feature) {
                    add_into(s, &gf);
                }
                if let Some(s) = self.slot(adj, *points) {
                    add_into(s, &gp);
                }
            }
            Op::Msda {
                layout,
                value,
                refs,
                offsets,
                weights,
            } => {
                let d = self.value(*value).rows_cols().1;
                let grads = msda_backward(
                    layout,
                    self.value(*value).data(),
                    d,
                    self.value(*refs).data(),
                    self.value(*offsets).data(),
                    self.value(*weights).data(),
                    g,
                );
                for (v, gv) in [
                    (*value, grads.value),
                    (*refs, grads.refs),
                    (*offsets, grads.offsets),
                    (*weights, grads.weights),
                ] {
                    if let Some(s) = self.slot(adj, v) {
                        add_into(s, &gv);
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let c = self.value(*a).rows_cols().1;
                if let Some(s) = self.slot(adj, *a) {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut s[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(s) = self.slot(adj, p) {
                        add_into(s, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).rows_cols().1;
                let (r, len) = node.value.rows_cols();
                if let Some(s) = self.slot(adj, *a) {
                    for i in 0..r {
                        add_into(&mut s[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.rows_cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).rows_cols().1;
                    if let Some(s) = self.slot(adj, p) {
                        for i in 0..r {
                            add_into(&mut s[i * pc..(i + 1) * pc], &g[i * total + off..i * total + off + pc]);
                        }
                    }
                    off += pc;
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, g);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = self.slot(adj, *a) {
                    let k = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|v| *v += k);
                }
            }
            Op::Focal {
                logits,
                targets,
                gamma,
                alpha,
            } => {
                let x = self.value(*logits).data();
                if let Some(s) = self.slot(adj, *logits) {
                    for j in 0..g.len() {
                        s[j] += g[j] * focal_grad(x[j], targets[j], *gamma, *alpha);
                    }
                }
            }
        }
    }
}

/// Focal term for one logit `z` with binary target `t`.
pub(crate) fn focal_value(z: f64, t: f64, gamma: f64, alpha: f64) -> f64 {
    let p = sigmoid(z);
    if t >= 0.5 {
        // log p = -softplus(-z)
        alpha * (1.0 - p).powf(gamma) * softplus(-z)
    } else {
        p.powf(gamma) * softplus(z)
    }
}

fn focal_grad(z: f64, t: f64, gamma: f64, alpha: f64) -> f64 {
    let p = sigmoid(z);
    if t >= 0.5 {
        let log_p = -softplus(-z);
        alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p))
    } else {
        let log_q = -softplus(z);
        -(p.powf(gamma)) * (gamma * (1.0 - p) * log_q - p)
    }
}
