use std::process::Command;

fn vitlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vitlab")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 1, "bogus": 3}}"#).unwrap();
    let out = vitlab(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"checkpoints": [{"id": "original", "path": "/nonexistent/m.vitc"}]}"#).unwrap();
    let out = vitlab(&["bench", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("bench.csv").exists());
}

#[test]
fn unknown_subcommand_fails() {
    assert!(!vitlab(&["frobnicate"]).status.success());
}

#[test]
fn help_lists_subcommands() {
    let out = String::from_utf8(vitlab(&["--help"]).stdout).unwrap();
    for s in ["train", "compress", "attack", "transfer", "bench", "report"] {
        assert!(out.contains(s), "help is missing {s}");
    }
}
