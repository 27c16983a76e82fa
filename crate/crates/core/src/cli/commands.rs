use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{evaluate_task, next_task, run_episode, Dataset, TaskOutcome};
use super::svg::{bar_chart, line_chart};
use super::{RunConfig, Variant};
use crate::data::{generate_dataset, TEST_MANIFEST};
use crate::error::{Error, Result};
use crate::metrics::{save_detections, EvalReport};
use crate::protocol::{
    build_exemplar_store, checkpoint_load, checkpoint_save, train_task, EpisodeState, EpochLog,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.owck";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINETUNE_LOG: &str = "finetune_log.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const DETECTIONS: &str = "detections.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Incremental,
    /// Evaluates the given 1-based task, or the latest trained one.
    Eval(Option<usize>),
    Report,
    Ablate,
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn task_dir(out: &Path, task: usize) -> PathBuf {
    out.join(format!("task{task}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn log_lines(log: &[EpochLog]) -> String {
    log.iter()
        .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
        .collect()
}

fn load_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let dir = data_dir(out);
    if !dir.join(TEST_MANIFEST).exists() {
        return Err(Error::Missing(dir.join(TEST_MANIFEST)));
    }
    Dataset::load(&dir, cfg.split.tasks.len())
}

/// Highest 1-based task with a checkpoint under `out`.
fn latest_task(out: &Path, tasks: usize) -> Option<usize> {
    (1..=tasks).rev().find(|&t| task_dir(out, t).join(CHECKPOINT_FILE).exists())
}

fn write_outcome(dir: &Path, o: &TaskOutcome) -> Result<()> {
    write(&dir.join(TRAIN_LOG), &log_lines(&o.train_log))?;
    if !o.finetune_log.is_empty() {
        write(&dir.join(FINETUNE_LOG), &log_lines(&o.finetune_log))?;
    }
    write_report(dir, &o.report)?;
    save_detections(&o.detections, &dir.join(DETECTIONS))
}

fn write_report(dir: &Path, r: &EvalReport) -> Result<()> {
    write(&dir.join(REPORT_JSON), &r.to_json())?;
    write(&dir.join(REPORT_TEXT), &r.to_text())
}

/// Saves the state even when the step that produced it failed, then passes the result on.
fn checkpoint_after<T>(state: &EpisodeState, dir: &Path, result: Result<T>) -> Result<T> {
    fs::create_dir_all(dir)?;
    checkpoint_save(state, &dir.join(CHECKPOINT_FILE))?;
    result
}

pub fn run_command(cmd: Command, cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir();
    match cmd {
        Command::GenData => {
            let dir = data_dir(&out);
            generate_dataset(&cfg.split)?.write_to(&dir)?;
            write(&out.join("config.toml"), &cfg.to_toml())
        }
        Command::Train => {
            let data = load_data(cfg, &out)?;
            let first = &cfg.split.tasks[0];
            let mut state = EpisodeState::new(cfg.model.clone(), first, cfg.seed)?;
            let dir = task_dir(&out, 1);
            let log = train_task(&mut state, &data.train[0], &cfg.train, &cfg.loss, cfg.train.lr, cfg.train.epochs);
            let log = checkpoint_after(&state, &dir, log)?;
            state.exemplars = build_exemplar_store(&data.train[0], first, cfg.train.exemplar_cap, cfg.seed)?;
            checkpoint_save(&state, &dir.join(CHECKPOINT_FILE))?;
            write(&dir.join(TRAIN_LOG), &log_lines(&log))
        }
        Command::Incremental => {
            let tasks = cfg.split.tasks.len();
            let Some(done) = latest_task(&out, tasks) else {
                return Err(Error::Missing(task_dir(&out, 1).join(CHECKPOINT_FILE)));
            };
            if done == tasks {
                return Err(Error::contract(format!("all {tasks} tasks are already trained")));
            }
            let data = load_data(cfg, &out)?;
            let mut state = checkpoint_load(&task_dir(&out, done).join(CHECKPOINT_FILE))?;
            let dir = task_dir(&out, done + 1);
            let result = next_task(&mut state, cfg, &data, done, true);
            let (log, ft) = checkpoint_after(&state, &dir, result)?;
            write(&dir.join(TRAIN_LOG), &log_lines(&log))?;
            write(&dir.join(FINETUNE_LOG), &log_lines(&ft))
        }
        Command::Eval(task) => {
            let task = match task.or_else(|| latest_task(&out, cfg.split.tasks.len())) {
                Some(t) if (1..=cfg.split.tasks.len()).contains(&t) => t,
                Some(t) => return Err(Error::config("task", format!("no task {t} in the split"))),
                None => return Err(Error::Missing(task_dir(&out, 1).join(CHECKPOINT_FILE))),
            };
            let dir = task_dir(&out, task);
            let state = checkpoint_load(&dir.join(CHECKPOINT_FILE))?;
            let data = load_data(cfg, &out)?;
            let (report, dets) = evaluate_task(&state, cfg, &data, task - 1)?;
            write_report(&dir, &report)?;
            save_detections(&dets, &dir.join(DETECTIONS))
        }
        Command::Report => report(&out, cfg.split.tasks.len()),
        Command::Ablate => ablate(cfg, &out),
    }
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Task table in the layout of the multi-task results: one row per task.
pub fn task_table(reports: &[EvalReport]) -> String {
    let mut s = String::from("| Task | U-Recall | mAP previous | mAP current | mAP both | WI | A-OSE |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.task,
            pct(r.u_recall),
            pct(r.map_previous),
            pct(r.map_current),
            pct(r.map_both),
            r.wi.map_or_else(|| "-".into(), |w| format!("{w:.4}")),
            r.a_ose.map_or_else(|| "-".into(), |a| a.to_string()),
        );
    }
    s
}

fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                context: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn report(out: &Path, tasks: usize) -> Result<()> {
    let mut reports = Vec::new();
    let mut losses = Vec::new();
    for t in 1..=tasks {
        let dir = task_dir(out, t);
        let path = dir.join(REPORT_JSON);
        if path.exists() {
            reports.push(EvalReport::from_json(&fs::read_to_string(&path)?)?);
        }
        if dir.join(TRAIN_LOG).exists() {
            let log = read_log(&dir.join(TRAIN_LOG))?;
            losses.push((format!("task {t}"), log.iter().map(|l| l.loss).collect()));
        }
    }
    if reports.is_empty() {
        return Err(Error::Missing(task_dir(out, 1).join(REPORT_JSON)));
    }
    let dir = out.join("report");
    write(&dir.join("table.md"), &task_table(&reports))?;
    write(&dir.join("loss.svg"), &line_chart("training loss per epoch", &losses))?;
    let bars: Vec<(String, f64)> = reports
        .iter()
        .filter_map(|r| r.u_recall.map(|u| (format!("task {}", r.task), u)))
        .collect();
    write(&dir.join("u_recall.svg"), &bar_chart("U-Recall per task", &bars))
}

/// One ablation row: per-task reports of a variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    /// Mean U-Recall over the tasks that have unknown ground truth.
    pub fn mean_u_recall(&self) -> Option<f64> {
        let v: Vec<f64> = self.reports.iter().filter_map(|r| r.u_recall).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs the three-variant ladder under one seed.
pub fn run_ablation(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    Variant::LADDER
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set_variant(v);
            let outcomes = run_episode(&c, data, |_, o| match out {
                Some(root) => write_outcome(&task_dir(&root.join("ablation").join(v.slug()), o.task), o),
                None => Ok(()),
            })?;
            Ok(AblationRow {
                variant: v,
                reports: outcomes.into_iter().map(|o| o.report).collect(),
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let tasks = rows.first().map_or(0, |r| r.reports.len());
    let mut s = String::from("| Variant | U-Recall (mean) |");
    for t in 1..=tasks {
        let _ = write!(s, " U-Recall T{t} | mAP T{t} |");
    }
    s.push('\n');
    s.push_str(&"|---".repeat(2 + 2 * tasks));
    s.push_str("|\n");
    for r in rows {
        let _ = write!(s, "| {} | {} |", r.variant.name(), pct(r.mean_u_recall()));
        for rep in &r.reports {
            let _ = write!(s, " {} | {} |", pct(rep.u_recall), pct(rep.map_both));
        }
        s.push('\n');
    }
    s
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = data_dir(out);
    let data = if dir.join(TEST_MANIFEST).exists() {
        Dataset::load(&dir, cfg.split.tasks.len())?
    } else {
        Dataset::generate(cfg)?
    };
    let rows = run_ablation(cfg, &data, Some(out))?;
    let root = out.join("ablation");
    write(&root.join("table.md"), &ablation_table(&rows))?;
    write(
        &root.join("summary.json"),
        &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"),
    )?;
    let bars: Vec<(String, f64)> = rows
        .iter()
        .map(|r| (r.variant.name().to_string(), r.mean_u_recall().unwrap_or(0.0)))
        .collect();
    write(&root.join("u_recall.svg"), &bar_chart("mean U-Recall by variant", &bars))
}
