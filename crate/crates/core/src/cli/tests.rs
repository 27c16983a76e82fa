use std::fs;

use super::*;
use crate::data::RenderParams;
use crate::error::Error;
use crate::model::ModelConfig;
use crate::protocol::checkpoint_load;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        d: 8,
        m: 6,
        levels: 2,
        points: 2,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn: 16,
        backbone_width: 4,
        attention_stage: 1,
    };
    cfg.split.images_per_task_train = 4;
    cfg.split.images_test = 3;
    cfg.split.render = RenderParams {
        width: 32,
        height: 32,
        min_size: 8,
        max_size: 14,
        max_objects: 3,
        ..RenderParams::default()
    };
    cfg.train.epochs = 1;
    cfg.train.finetune_epochs = 1;
    cfg
}

#[test]
fn empty_file_gives_defaults() {
    let cfg = RunConfig::from_toml("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.loss.alpha, 0.1);
    assert_eq!(cfg.loss.k_u, 5);
    assert_eq!(cfg.infer.top_k, 50);
    assert_eq!(cfg.train.exemplar_cap, 50);
    assert_eq!(cfg.eval.wi_recall, 0.8);
}

#[test]
fn flags_override_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "seed = 3\n[loss]\nalpha = 0.1\nk_u = 2\n").unwrap();
    let o = Overrides {
        alpha: Some(0.2),
        top_k: Some(10),
        ..Overrides::default()
    };
    let cfg = parse_config(Some(&path), &o).unwrap();
    assert_eq!(cfg.loss.alpha, 0.2);
    assert_eq!(cfg.loss.k_u, 2);
    assert_eq!(cfg.infer.top_k, 10);
    assert_eq!(cfg.seed, 3);
    let off = parse_config(
        Some(&path),
        &Overrides {
            no_nc: true,
            no_objectness: true,
            ..Overrides::default()
        },
    )
    .unwrap();
    assert!(!off.loss.novelty && !off.loss.objectness && !off.infer.emit_unknown);
}

#[test]
fn dump_reparses_to_equal_config() {
    let mut cfg = tiny();
    cfg.seed = 17;
    cfg.out = Some("runs/x".into());
    cfg.train.clip_norm = Some(0.5);
    cfg.set_variant(Variant::Nc);
    let text = cfg.to_toml();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    let d = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
}

#[test]
fn unknown_keys_and_bounds_name_the_key() {
    let err = RunConfig::from_toml("[loss]\nalpah = 0.3\n").unwrap_err();
    assert!(matches!(&err, Error::Config { key, .. } if key == "alpah"), "{err}");
    let err = RunConfig::from_toml("bogus = 1\n").unwrap_err();
    assert!(matches!(&err, Error::Config { key, .. } if key == "bogus"), "{err}");
    let bad = |o: Overrides| parse_config(None, &o).unwrap_err();
    let e = bad(Overrides {
        alpha: Some(-1.0),
        ..Overrides::default()
    });
    assert!(matches!(&e, Error::Config { key, .. } if key == "loss.alpha"), "{e}");
    let e = bad(Overrides {
        top_k: Some(0),
        ..Overrides::default()
    });
    assert!(matches!(&e, Error::Config { key, .. } if key == "infer.top_k"), "{e}");
    let mut cfg = tiny();
    cfg.split.render.width = 4;
    assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    assert!(matches!(
        parse_config(Some(std::path::Path::new("/nonexistent/run.toml")), &Overrides::default()),
        Err(Error::Missing(_))
    ));
}

#[test]
fn variants_set_switches() {
    let mut cfg = RunConfig::default();
    let got: Vec<(bool, bool, bool)> = Variant::LADDER
        .iter()
        .map(|&v| {
            cfg.set_variant(v);
            (cfg.loss.novelty, cfg.loss.objectness, cfg.infer.emit_unknown)
        })
        .collect();
    assert_eq!(got, vec![(false, false, false), (true, false, true), (true, true, true)]);
    let names: Vec<&str> = Variant::LADDER.iter().map(|v| v.name()).collect();
    assert_eq!(names, ["Baseline", "+NC", "full"]);
}

#[test]
fn eval_without_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.out = Some(dir.path().to_path_buf());
    let err = run_command(Command::Eval(None), &cfg).unwrap_err();
    let want = dir.path().join("task1").join(CHECKPOINT_FILE);
    assert!(matches!(&err, Error::Missing(p) if *p == want), "{err}");
    assert!(err.to_string().contains("task1/checkpoint.owck"));
    let err = run_command(Command::Train, &cfg).unwrap_err();
    assert!(matches!(err, Error::Missing(_)));
    assert!(matches!(run_command(Command::Report, &cfg), Err(Error::Missing(_))));
    assert!(matches!(run_command(Command::Incremental, &cfg), Err(Error::Missing(_))));
}

#[test]
fn commands_run_the_full_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.out = Some(dir.path().to_path_buf());
    run_command(Command::GenData, &cfg).unwrap();
    assert!(dir.path().join("data/test.jsonl").exists());
    assert!(dir.path().join("data/train_task4.jsonl").exists());
    run_command(Command::Train, &cfg).unwrap();
    run_command(Command::Eval(None), &cfg).unwrap();
    for _ in 1..4 {
        run_command(Command::Incremental, &cfg).unwrap();
        run_command(Command::Eval(None), &cfg).unwrap();
    }
    assert!(matches!(run_command(Command::Incremental, &cfg), Err(Error::Contract(_))));
    let widths: Vec<usize> = (1..=4)
        .map(|t| {
            checkpoint_load(&task_dir(dir.path(), t).join(CHECKPOINT_FILE))
                .unwrap()
                .params
                .classifier_width()
        })
        .collect();
    assert_eq!(widths, vec![3, 5, 7, 9]);
    run_command(Command::Report, &cfg).unwrap();
    let table = fs::read_to_string(dir.path().join("report/table.md")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("| 4 | - |"), "{table}");
    assert!(!rows[0].starts_with("| 1 | - |"));
    let log = fs::read_to_string(task_dir(dir.path(), 2).join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains("\"l_o\""));
    assert!(fs::read_to_string(dir.path().join("report/loss.svg")).unwrap().starts_with("<svg"));
    // eval is idempotent
    let report = task_dir(dir.path(), 4).join(REPORT_JSON);
    let first = fs::read(&report).unwrap();
    run_command(Command::Eval(Some(4)), &cfg).unwrap();
    assert_eq!(fs::read(&report).unwrap(), first);
    assert!(matches!(run_command(Command::Eval(Some(9)), &cfg), Err(Error::Config { .. })));
}

#[test]
fn ablation_rows_follow_the_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.out = Some(dir.path().to_path_buf());
    run_command(Command::Ablate, &cfg).unwrap();
    let table = fs::read_to_string(dir.path().join("ablation/table.md")).unwrap();
    let names: Vec<&str> = table
        .lines()
        .skip(2)
        .map(|l| l.split('|').nth(1).unwrap().trim())
        .collect();
    assert_eq!(names, ["Baseline", "+NC", "full"]);
    let rows: Vec<AblationRow> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ablation/summary.json")).unwrap()).unwrap();
    assert_eq!(rows[0].mean_u_recall(), Some(0.0));
    assert!(dir.path().join("ablation/full/task4/report.json").exists());
    assert!(dir.path().join("ablation/u_recall.svg").exists());
}

#[test]
fn charts_are_well_formed() {
    let l = line_chart("a<b", &[("x".into(), vec![1.0, 0.5, 0.25])]);
    assert!(l.contains("a&lt;b") && l.ends_with("</svg>\n"));
    assert_eq!(l.matches("<circle").count(), 3);
    let b = bar_chart("u", &[("Baseline".into(), 0.0), ("full".into(), 0.5)]);
    assert_eq!(b.matches("<rect").count(), 3);
    assert!(b.contains(">50.00<"));
}
