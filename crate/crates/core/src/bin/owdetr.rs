use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use owdetr::cli::{parse_config, run_command, Command, Overrides, OUT_ENV};

#[derive(Parser)]
#[command(name = "owdetr", version, about = "Desk-scale open-world detection transformer")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic benchmark and write manifests.
    GenData(Common),
    /// Train task 1 from scratch.
    Train(Common),
    /// Oracle step, training, exemplar update and replay finetuning for the next task.
    Incremental(Common),
    /// Evaluate a trained task on the test manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        /// 1-based task; defaults to the latest checkpoint.
        #[arg(long)]
        task: Option<usize>,
    },
    /// Aggregate task reports into a table and plots.
    Report(Common),
    /// Run Baseline, +NC and full under one seed.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "k-u")]
    k_u: Option<usize>,
    #[arg(long = "top-k")]
    top_k: Option<usize>,
    /// Disable novelty classification on pseudo-labels.
    #[arg(long = "no-nc")]
    no_nc: bool,
    #[arg(long = "no-objectness")]
    no_objectness: bool,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Evaluation worker threads; defaults to the config value (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Incremental(c) => (Command::Incremental, c),
        Cmd::Eval { common, task } => (Command::Eval(task), common),
        Cmd::Report(c) => (Command::Report, c),
        Cmd::Ablate(c) => (Command::Ablate, c),
    };
    let overrides = Overrides {
        seed: common.seed,
        alpha: common.alpha,
        k_u: common.k_u,
        top_k: common.top_k,
        no_nc: common.no_nc,
        no_objectness: common.no_objectness,
        out: common.out,
    };
    let result = parse_config(common.config.as_deref(), &overrides).and_then(|mut cfg| {
        if let Some(w) = common.workers {
            cfg.workers = w;
        }
        if cfg.workers > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build_global()
                .ok();
        }
        run_command(cmd, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("owdetr: {e}");
            ExitCode::FAILURE
        }
    }
}
