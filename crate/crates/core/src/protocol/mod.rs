//! Episodic open-world loop: train, oracle-label, replay-finetune, infer, checkpoint.

mod checkpoint;
mod exemplar;
mod infer;
mod labels;
mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_from_bytes, checkpoint_load, checkpoint_save, checkpoint_to_bytes, CHECKPOINT_VERSION};
pub use exemplar::{build_exemplar_store, Exemplar, ExemplarStore};
pub use infer::{infer, infer_all, topk_entries, Detection, DetectionSet, InferConfig};
pub use labels::LabelSpace;
pub use optim::{Adam, AdamConfig};

use crate::data::{ImageBank, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{bind, forward, ModelConfig, Params};
use crate::numerics::Tape;
use crate::openworld::{image_loss, LossConfig};

/// Optimization and replay hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub finetune_epochs: usize,
    /// Finetune learning rate is `lr · finetune_lr_factor`.
    pub finetune_lr_factor: f64,
    /// Images per optimizer step; gradients are averaged.
    pub batch: usize,
    /// Global gradient-norm clip; `None` disables it.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    pub exemplar_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 20,
            finetune_epochs: 5,
            finetune_lr_factor: 0.1,
            batch: 1,
            clip_norm: None,
            adam: AdamConfig::default(),
            exemplar_cap: 50,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig {
            lr: 2e-4,
            epochs: 50,
            finetune_epochs: 20,
            ..Self::default()
        }
    }

    pub fn finetune_lr(&self) -> f64 {
        self.lr * self.finetune_lr_factor
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if !(self.finetune_lr_factor > 0.0) {
            return Err(Error::config("train.finetune_lr_factor", "must be > 0"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("train.clip_norm", "must be > 0"));
        }
        if self.exemplar_cap == 0 {
            return Err(Error::config("train.exemplar_cap", "must be at least 1"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::config("train.adam", "betas must lie in [0, 1)"));
        }
        if !(a.eps > 0.0 && a.weight_decay >= 0.0) {
            return Err(Error::config("train.adam", "eps must be > 0 and weight_decay >= 0"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub l_n: f64,
    pub l_r: f64,
    pub l_o: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Everything carried between tasks.
#[derive(Clone, Debug)]
pub struct EpisodeState {
    pub model: ModelConfig,
    pub params: Params,
    pub labels: LabelSpace,
    pub exemplars: ExemplarStore,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub epochs_run: u64,
    pub steps_run: u64,
}

impl EpisodeState {
    /// Fresh model over the first task's classes.
    pub fn new(model: ModelConfig, first: &[u32], seed: u64) -> Result<Self> {
        model.validate()?;
        let labels = LabelSpace::new(first)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&model, first.len(), &mut rng)?;
        let adam = Adam::new(&params);
        Ok(EpisodeState {
            model,
            params,
            labels,
            exemplars: ExemplarStore::default(),
            adam,
            rng,
            epochs_run: 0,
            steps_run: 0,
        })
    }
}

struct StepOutput {
    grads: BTreeMap<String, Vec<f64>>,
    l_n: f64,
    l_r: f64,
    l_o: f64,
    loss: f64,
}

fn image_gradients(
    params: &Params,
    model: &ModelConfig,
    img: &LabeledImage,
    known: &[u32],
    loss: &LossConfig,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let bound = bind(params, &mut tape, true);
    let out = forward(&mut tape, &bound, model, &img.pixels, known.len())?;
    let il = image_loss(&mut tape, &out, &img.instances, known, loss)?;
    let total = tape.value(il.total).item();
    tape.backward(il.total)?;
    let mut grads = BTreeMap::new();
    for (name, v) in bound.iter() {
        let g = tape.grad(v).map_or_else(|| vec![0.0; params.get(name).map_or(0, |t| t.numel())], <[f64]>::to_vec);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient for {name} on image {}", img.image_id)));
        }
        grads.insert(name.to_string(), g);
    }
    Ok(StepOutput {
        grads,
        l_n: il.l_n,
        l_r: il.l_r,
        l_o: il.l_o,
        loss: total,
    })
}

/// Rescales all gradients together so their joint L2 norm is at most `max`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Runs `epochs` passes over `images` at learning rate `lr`.
///
/// On divergence the state keeps the parameters of the last good step and the error is returned.
pub fn train_task(
    state: &mut EpisodeState,
    images: &[LabeledImage],
    cfg: &TrainConfig,
    loss: &LossConfig,
    lr: f64,
    epochs: usize,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    loss.validate()?;
    for img in images {
        if let Some(i) = img.instances.iter().find(|i| !state.labels.contains(i.label)) {
            return Err(Error::contract(format!(
                "image {} is annotated with class {} outside the known set",
                img.image_id, i.label
            )));
        }
    }
    let known = state.labels.known().to_vec();
    let mut logs = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for _ in 0..epochs {
        let start = Instant::now();
        order.shuffle(&mut state.rng);
        let mut sums = [0.0; 4];
        for chunk in order.chunks(cfg.batch) {
            let outs: Vec<StepOutput> = chunk
                .par_iter()
                .map(|&i| image_gradients(&state.params, &state.model, &images[i], &known, loss))
                .collect::<Result<_>>()?;
            let mut grads = BTreeMap::new();
            let scale = 1.0 / outs.len() as f64;
            for o in &outs {
                for (k, g) in &o.grads {
                    let acc = grads.entry(k.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x * scale;
                    }
                }
                sums[0] += o.l_n;
                sums[1] += o.l_r;
                sums[2] += o.l_o;
                sums[3] += o.loss;
            }
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            let last_good = (state.params.clone(), state.adam.clone());
            state.adam.update(&mut state.params, &grads, lr, &cfg.adam)?;
            if state.params.iter().any(|(_, t)| !t.all_finite()) {
                (state.params, state.adam) = last_good;
                return Err(Error::Divergence("parameters became non-finite".into()));
            }
            state.steps_run += 1;
        }
        state.epochs_run += 1;
        let n = images.len().max(1) as f64;
        logs.push(EpochLog {
            epoch: state.epochs_run,
            l_n: sums[0] / n,
            l_r: sums[1] / n,
            l_o: sums[2] / n,
            loss: sums[3] / n,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(logs)
}

/// Extends the known set and grows the classifier (and its optimizer moments) to match.
pub fn oracle_step(state: &mut EpisodeState, new_classes: &[u32]) -> Result<()> {
    let old = state.labels.width();
    state.labels.add(new_classes)?;
    let new = state.labels.width();
    state.params.grow_classifier(new - old, &mut state.rng)?;
    state.adam.grow_classifier(state.model.d, old, new);
    Ok(())
}

/// Exemplar-replay finetuning on the stored balanced set at the reduced learning rate.
pub fn incremental_finetune(
    state: &mut EpisodeState,
    bank: &ImageBank,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<Vec<EpochLog>> {
    if state.exemplars.is_empty() {
        return Err(Error::contract("exemplar store is empty"));
    }
    let images = state.exemplars.training_images(bank)?;
    train_task(state, &images, cfg, loss, cfg.finetune_lr(), cfg.finetune_epochs)
}

#[cfg(test)]
mod tests;
