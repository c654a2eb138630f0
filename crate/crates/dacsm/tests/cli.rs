use std::path::Path;
use std::process::Command;

use dacsm::commands::{eval_run, train_run, CHECKPOINT_FILE, EVAL_FILE, METRICS_FILE, SUMMARY_FILE};
use dacsm::formats::RunSummary;
use dacsm::{cmd_eval, cmd_train, cmd_verify, RunArgs};

fn quick(out: &Path) -> RunArgs {
    RunArgs {
        overrides: vec![
            "train.epochs=3".into(),
            "train.warmup_epochs=1".into(),
            "data.source_per_class=6".into(),
            "data.target_per_class=6".into(),
        ],
        out: Some(out.to_path_buf()),
        ..RunArgs::default()
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dacsm"))
}

#[test]
fn train_writes_all_files_and_echoes_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = quick(dir.path());
    args.seed = Some(3);
    let summary = train_run(&args, &mut std::io::sink()).unwrap();
    for f in [METRICS_FILE, SUMMARY_FILE, CHECKPOINT_FILE] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let on_disk: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, summary);
    assert_eq!(summary.epochs, 3);
    assert_eq!(summary.seed, 3);
    let keys: Vec<&str> = summary.overrides.iter().map(|o| o.key.as_str()).collect();
    assert_eq!(
        keys[..4],
        [
            "train.epochs",
            "train.warmup_epochs",
            "data.source_per_class",
            "data.target_per_class"
        ]
    );
    assert!(keys.contains(&"seed"));
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("epoch,cls_s,cls_s2t,dst,cls_t,style,total,target_avg,acc_0"));
}

#[test]
fn eval_reproduces_final_epoch_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let args = quick(dir.path());
    let summary = train_run(&args, &mut std::io::sink()).unwrap();
    let eval_out = dir.path().join("eval");
    let eval_args = RunArgs {
        out: Some(eval_out.clone()),
        ..args.clone()
    };
    let ev = eval_run(&dir.path().join(CHECKPOINT_FILE), &eval_args, &mut std::io::sink()).unwrap();
    assert_eq!(ev.eval, summary.last.eval);
    assert!(eval_out.join(EVAL_FILE).is_file());
}

#[test]
fn zero_epochs_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let args = RunArgs {
        overrides: vec![
            "train.epochs=0".into(),
            "data.source_per_class=5".into(),
            "data.target_per_class=5".into(),
        ],
        out: Some(dir.path().to_path_buf()),
        ..RunArgs::default()
    };
    assert_eq!(cmd_train(&args, &mut std::io::sink()), 0);
    let summary: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.epochs, 0);
    assert_eq!(summary.initial, summary.last);
}

#[test]
fn config_errors_exit_two_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nepochs = 2\nlearning_rate = 0.1\n").unwrap();
    let args = RunArgs {
        config: Some(cfg),
        out: Some(dir.path().join("out")),
        ..RunArgs::default()
    };
    let mut log = Vec::new();
    assert_eq!(cmd_train(&args, &mut log), 2);
    assert!(String::from_utf8(log).unwrap().contains("learning_rate"));

    let args = RunArgs {
        overrides: vec!["train.warmup_epochs=99".into()],
        ..RunArgs::default()
    };
    assert_eq!(cmd_train(&args, &mut std::io::sink()), 2);
}

#[test]
fn divergence_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = quick(dir.path());
    args.overrides
        .extend(["train.lr=1e12".into(), "train.momentum=0.0".into()]);
    let mut log = Vec::new();
    assert_eq!(cmd_train(&args, &mut log), 3);
    assert!(String::from_utf8(log).unwrap().contains("non-finite"));
}

#[test]
fn bad_checkpoints_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let args = quick(&dir.path().join("out"));
    let missing = dir.path().join("nope.json");
    let mut log = Vec::new();
    assert_eq!(cmd_eval(&missing, &args, &mut log), 2);
    assert!(String::from_utf8(log).unwrap().contains("nope.json"));

    let corrupt = dir.path().join("corrupt.json");
    std::fs::write(&corrupt, "{\"schema\": \"dacsm-checkpoint/1\", \"epochs\": 1").unwrap();
    assert_eq!(cmd_eval(&corrupt, &args, &mut std::io::sink()), 2);
    std::fs::write(&corrupt, "{\"schema\": \"other/1\"}").unwrap();
    assert_eq!(cmd_eval(&corrupt, &args, &mut std::io::sink()), 2);
}

#[test]
fn verify_suite_names() {
    let mut log = Vec::new();
    assert_eq!(cmd_verify("appendix-z", &mut log), 2);
    assert!(String::from_utf8(log).unwrap().contains("unknown suite"));
    let mut log = Vec::new();
    assert_eq!(cmd_verify("appendix-a", &mut log), 0);
    let text = String::from_utf8(log).unwrap();
    assert!(text.contains("0.001"), "{text}");
    assert!(text.contains("PASS"));
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = bin()
        .args(["train", "--set", "train.epochs=0", "--set", "data.source_per_class=5"])
        .args(["--set", "data.target_per_class=5", "--seed", "7", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    assert!(out.join(SUMMARY_FILE).is_file());

    let status = bin().args(["train", "--set", "nope=1"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stdout).contains("nope"));

    let status = bin().args(["verify", "everything"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    let status = bin()
        .args(["eval", "--checkpoint", "/nonexistent/ck.json"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    let status = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
}
