//! The multi-task episode shared by the commands.

use std::path::Path;

use crate::data::{generate_dataset, load_manifest, train_manifest_name, ImageBank, LabeledImage, TEST_MANIFEST};
use crate::error::Result;
use crate::metrics::{evaluate, EvalReport, ImageTruth};
use crate::protocol::{
    build_exemplar_store, incremental_finetune, infer_all, oracle_step, train_task, DetectionSet, EpisodeState,
    EpochLog,
};

use super::RunConfig;

/// Decoded training and test images of a split.
pub struct Dataset {
    pub train: Vec<Vec<LabeledImage>>,
    pub test: Vec<LabeledImage>,
    pub bank: ImageBank,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let ds = generate_dataset(&cfg.split)?;
        let bank = ds.bank();
        let train = ds
            .train
            .iter()
            .map(|m| m.labeled_images(&bank))
            .collect::<Result<_>>()?;
        let test = ds.test.labeled_images(&bank)?;
        Ok(Dataset { train, test, bank })
    }

    /// Loads what `gen-data` wrote under `dir`.
    pub fn load(dir: &Path, tasks: usize) -> Result<Self> {
        let mut bank = ImageBank::default();
        let mut manifests = Vec::with_capacity(tasks);
        for t in 0..tasks {
            let m = load_manifest(&dir.join(train_manifest_name(t)))?;
            bank.extend(&ImageBank::load(&m, dir)?);
            manifests.push(m);
        }
        let test_m = load_manifest(&dir.join(TEST_MANIFEST))?;
        bank.extend(&ImageBank::load(&test_m, dir)?);
        let train = manifests
            .iter()
            .map(|m| m.labeled_images(&bank))
            .collect::<Result<_>>()?;
        let test = test_m.labeled_images(&bank)?;
        Ok(Dataset { train, test, bank })
    }
}

/// Logs and evaluation of one task.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    /// 1-based.
    pub task: usize,
    pub train_log: Vec<EpochLog>,
    pub finetune_log: Vec<EpochLog>,
    pub report: EvalReport,
    pub detections: Vec<DetectionSet>,
}

/// Trains a fresh model on task 1 and stores its exemplars.
pub fn first_task(cfg: &RunConfig, data: &Dataset) -> Result<(EpisodeState, Vec<EpochLog>)> {
    let first = &cfg.split.tasks[0];
    let mut state = EpisodeState::new(cfg.model.clone(), first, cfg.seed)?;
    let log = train_task(&mut state, &data.train[0], &cfg.train, &cfg.loss, cfg.train.lr, cfg.train.epochs)?;
    state.exemplars = build_exemplar_store(&data.train[0], first, cfg.train.exemplar_cap, cfg.seed)?;
    Ok((state, log))
}

/// Oracle step to task `t` (0-based, `t ≥ 1`), training, exemplar update and optional replay finetuning.
pub fn next_task(
    state: &mut EpisodeState,
    cfg: &RunConfig,
    data: &Dataset,
    t: usize,
    finetune: bool,
) -> Result<(Vec<EpochLog>, Vec<EpochLog>)> {
    let new = &cfg.split.tasks[t];
    oracle_step(state, new)?;
    let log = train_task(state, &data.train[t], &cfg.train, &cfg.loss, cfg.train.lr, cfg.train.epochs)?;
    let added = build_exemplar_store(&data.train[t], new, cfg.train.exemplar_cap, cfg.seed.wrapping_add(t as u64))?;
    state.exemplars.merge(added);
    let ft = if finetune {
        incremental_finetune(state, &data.bank, &cfg.train, &cfg.loss)?
    } else {
        Vec::new()
    };
    Ok((log, ft))
}

/// Test-set inference and the report of task `t` (0-based).
pub fn evaluate_task(
    state: &EpisodeState,
    cfg: &RunConfig,
    data: &Dataset,
    t: usize,
) -> Result<(EvalReport, Vec<DetectionSet>)> {
    let dets = infer_all(state, &data.test, &cfg.infer)?;
    let truths: Vec<ImageTruth> = data.test.iter().map(ImageTruth::from).collect();
    let previous: Vec<u32> = cfg.split.tasks[..t].iter().flatten().copied().collect();
    let report = evaluate(t + 1, &dets, &truths, &previous, &cfg.split.tasks[t], &cfg.eval)?;
    Ok((report, dets))
}

/// Runs every task of the split, calling `each` after each evaluation.
pub fn run_episode(
    cfg: &RunConfig,
    data: &Dataset,
    mut each: impl FnMut(&EpisodeState, &TaskOutcome) -> Result<()>,
) -> Result<Vec<TaskOutcome>> {
    let mut outcomes = Vec::new();
    let (mut state, train_log) = first_task(cfg, data)?;
    let (report, detections) = evaluate_task(&state, cfg, data, 0)?;
    let o = TaskOutcome {
        task: 1,
        train_log,
        finetune_log: Vec::new(),
        report,
        detections,
    };
    each(&state, &o)?;
    outcomes.push(o);
    for t in 1..cfg.split.tasks.len() {
        let (train_log, finetune_log) = next_task(&mut state, cfg, data, t, true)?;
        let (report, detections) = evaluate_task(&state, cfg, data, t)?;
        let o = TaskOutcome {
            task: t + 1,
            train_log,
            finetune_log,
            report,
            detections,
        };
        each(&state, &o)?;
        outcomes.push(o);
    }
    Ok(outcomes)
}
