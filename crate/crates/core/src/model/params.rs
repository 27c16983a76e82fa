//! Named parameter store and its binding onto a tape.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Focal-style prior for freshly initialized score logits: `σ(b) = 0.01`.
pub(crate) const PRIOR_BIAS: f64 = -4.595_119_850_134_59;

/// All learnable tensors, keyed by dotted name (sorted order is the canonical order).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles of a bound [`Params`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Binds the given vars to names, in order.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }
}

/// Places every parameter on `tape`, as gradient leaves when `trainable`.
pub fn bind(params: &Params, tape: &mut Tape, trainable: bool) -> Bound {
    let vars = params
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
        .collect();
    Bound { vars }
}

fn dense<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)
}

impl Params {
    /// Seeded initialization for a classifier over `n_known` known classes plus unknown.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, n_known: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::default();
        let (d, bw) = (cfg.d, cfg.backbone_width);

        for s in 0..=cfg.levels {
            let c_in = if s == 0 { 3 } else { bw };
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            p.insert(format!("backbone.conv{s}.w"), Tensor::randn(&[bw, c_in, 3, 3], std, rng));
            p.insert(format!("backbone.conv{s}.b"), Tensor::zeros(&[bw]));
        }
        for l in 0..cfg.levels {
            let std = (1.0 / bw as f64).sqrt();
            p.insert(format!("backbone.proj{l}.w"), Tensor::randn(&[d, bw, 1, 1], std, rng));
            p.insert(format!("backbone.proj{l}.b"), Tensor::zeros(&[d]));
        }
        p.insert("encoder.level_embed".into(), Tensor::randn(&[cfg.levels, d], 0.1, rng));

        for i in 0..cfg.enc_layers {
            let name = format!("encoder.{i}");
            p.init_deform(&format!("{name}.attn"), cfg, rng);
            p.init_ffn(&format!("{name}.ffn"), d, cfg.ffn, rng);
            p.init_norm(&format!("{name}.ln1"), d);
            p.init_norm(&format!("{name}.ln2"), d);
        }

        p.insert("decoder.queries".into(), Tensor::randn(&[cfg.m, d], 1.0, rng));
        p.init_linear("decoder.ref", d, 2, rng);
        for i in 0..cfg.dec_layers {
            let name = format!("decoder.{i}");
            for part in ["q", "k", "v", "out"] {
                p.init_linear(&format!("{name}.self.{part}"), d, d, rng);
            }
            p.init_deform(&format!("{name}.cross"), cfg, rng);
            p.init_ffn(&format!("{name}.ffn"), d, cfg.ffn, rng);
            for ln in ["ln1", "ln2", "ln3"] {
                p.init_norm(&format!("{name}.{ln}"), d);
            }
        }

        p.init_linear("head.cls", d, 1 + n_known, rng);
        p.fill("head.cls.b", PRIOR_BIAS);
        p.init_linear("head.obj", d, 1, rng);
        p.fill("head.obj.b", PRIOR_BIAS);
        p.init_linear("head.box.fc1", d, d, rng);
        p.init_linear("head.box.fc2", d, d, rng);
        p.init_linear("head.box.fc3", d, 4, rng);
        Ok(p)
    }

    fn insert(&mut self, name: String, t: Tensor) {
        self.tensors.insert(name, t);
    }

    fn fill(&mut self, name: &str, v: f64) {
        if let Some(t) = self.tensors.get_mut(name) {
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }

    fn init_linear<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        self.insert(format!("{name}.w"), dense(rng, fan_in, fan_out));
        self.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn init_norm(&mut self, name: &str, d: usize) {
        self.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
        self.insert(format!("{name}.b"), Tensor::zeros(&[d]));
    }

    fn init_ffn<R: Rng + ?Sized>(&mut self, name: &str, d: usize, hidden: usize, rng: &mut R) {
        self.init_linear(&format!("{name}.fc1"), d, hidden, rng);
        self.init_linear(&format!("{name}.fc2"), hidden, d, rng);
    }

    fn init_deform<R: Rng + ?Sized>(&mut self, name: &str, cfg: &ModelConfig, rng: &mut R) {
        let (d, s) = (cfg.d, cfg.samples_per_query());
        self.init_linear(&format!("{name}.value"), d, d, rng);
        self.init_linear(&format!("{name}.out"), d, d, rng);
        // Offsets start as a ring of distinct points around the reference point.
        self.insert(format!("{name}.offsets.w"), Tensor::randn(&[d, 2 * s], 0.01, rng));
        let hp = (cfg.heads * cfg.points) as f64;
        let mut bias = Vec::with_capacity(2 * s);
        for h in 0..cfg.heads {
            for _ in 0..cfg.levels {
                for pt in 0..cfg.points {
                    let th = 2.0 * PI * (h * cfg.points + pt) as f64 / hp;
                    bias.push(th.cos());
                    bias.push(th.sin());
                }
            }
        }
        self.insert(format!("{name}.offsets.b"), Tensor::new(&[2 * s], bias).expect("offset bias"));
        self.insert(format!("{name}.weights.w"), Tensor::randn(&[d, s], 0.01, rng));
        self.insert(format!("{name}.weights.b"), Tensor::zeros(&[s]));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Params {
            tensors: tensors.into_iter().collect(),
        }
    }

    /// Current classifier width `1 + |K|`.
    pub fn classifier_width(&self) -> usize {
        self.tensors.get("head.cls.b").map_or(0, Tensor::numel)
    }

    /// Appends `n_new` class outputs; existing columns, including unknown at 0, are untouched.
    pub fn grow_classifier<R: Rng + ?Sized>(&mut self, n_new: usize, rng: &mut R) -> Result<()> {
        if n_new == 0 {
            return Ok(());
        }
        let w = self
            .tensors
            .get("head.cls.w")
            .ok_or_else(|| Error::contract("parameters have no classifier"))?;
        let (d, old) = w.rows_cols();
        let new = old + n_new;
        let noise = Tensor::randn(&[d, n_new], 0.01, rng);
        let mut data = Vec::with_capacity(d * new);
        for r in 0..d {
            data.extend_from_slice(w.row(r));
            data.extend_from_slice(noise.row(r));
        }
        let grown = Tensor::new(&[d, new], data)?;
        let mut b = self.tensors["head.cls.b"].data().to_vec();
        b.resize(new, PRIOR_BIAS);
        self.tensors.insert("head.cls.w".into(), grown);
        self.tensors.insert("head.cls.b".into(), Tensor::new(&[new], b)?);
        Ok(())
    }
}
