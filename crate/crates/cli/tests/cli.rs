use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn peftdml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peftdml"))
        .args(args)
        .env_remove("PEFTDML_OUT")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "seed": 3,
  "dataset": {"train_scenes": 16, "val_scenes": 4, "test_scenes": 8},
  "pretrain": {"epochs": 2},
  "train": {"epochs": 2},
  "eval": {"sweep_ranks": [2]}
}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let out = peftdml(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_fails() {
    assert_eq!(peftdml(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        peftdml(&["eval", "--protocol", "nope"]).status.code(),
        Some(1)
    );
}

#[test]
fn help_succeeds() {
    let out = peftdml(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    for sub in ["gen-data", "pretrain", "train", "eval", "sweep", "report"] {
        assert!(String::from_utf8_lossy(&out.stdout).contains(sub), "{sub}");
    }
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out_dir = tmp.path().join("run");
    let out = out_dir.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut full = args.to_vec();
        full.extend_from_slice(&["--config", &cfg, "--out", out]);
        let o = peftdml(&full);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        o
    };
    run(&["gen-data"]);
    run(&["pretrain"]);
    run(&["train"]);
    for p in ["standard", "dropout", "weather", "zeroshot"] {
        run(&["eval", "--protocol", p]);
    }
    run(&["sweep"]);
    run(&["report"]);
    for name in [
        "run_config.json",
        "pretrained.json",
        "checkpoint.json",
        "curves.csv",
        "weather.csv",
        "sweep.csv",
        "summary.txt",
        "metrics_standard.json",
        "metrics_zeroshot.json",
    ] {
        assert!(out_dir.join(name).is_file(), "missing {name}");
    }
    let sweep = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("# config_hash="));
    assert_eq!(sweep.lines().count(), 3);

    // A different seed changes the config hash, so the stored data and
    // checkpoint no longer match.
    let o = peftdml(&[
        "eval",
        "--protocol",
        "standard",
        "--config",
        &cfg,
        "--out",
        out,
        "--seed",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}
