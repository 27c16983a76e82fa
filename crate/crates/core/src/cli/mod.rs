//! Configuration, the episode runner and the command implementations behind the `owdetr` binary.

mod commands;
mod config;
mod run;
mod svg;

pub use commands::{
    ablation_table, data_dir, run_ablation, run_command, task_dir, task_table, AblationRow, Command, CHECKPOINT_FILE,
    DETECTIONS, FINETUNE_LOG, REPORT_JSON, REPORT_TEXT, TRAIN_LOG,
};
pub use config::{parse_config, Overrides, RunConfig, Variant, OUT_ENV};
pub use run::{evaluate_task, first_task, next_task, run_episode, Dataset, TaskOutcome};
pub use svg::{bar_chart, line_chart};

#[cfg(test)]
mod tests;
