#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use bias_lens::train::TrainConfig;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bias-lens"))
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        seed: 4,
        dim: 8,
        hidden: 32,
        ae_epochs: 3,
        flow_epochs: 5,
        blocks: 4,
        flow_hidden: 16,
        embed_dim: 4,
        batch_size: 32,
        ..Default::default()
    }
}

pub struct Fixture {
    pub dir: PathBuf,
    pub data: PathBuf,
    pub config: PathBuf,
    pub ae: PathBuf,
    pub ckpt: PathBuf,
}

/// A tiny family and a checkpoint trained on it through the CLI, built once
/// per test binary under `tag`.
pub fn fixture(tag: &str) -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("fixture-{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let f = Fixture {
            data: dir.join("data"),
            config: dir.join("config.json"),
            ae: dir.join("ae.blens"),
            ckpt: dir.join("model.blens"),
            dir,
        };
        std::fs::write(&f.config, serde_json::to_string_pretty(&small_config()).unwrap()).unwrap();
        let s = |p: &Path| p.to_str().unwrap().to_string();
        run_ok(&["gen", "--count", "120", "--seed", "3", "--out", &s(&f.data)]);
        run_ok(&["train-ae", "--data", &s(&f.data), "--config", &s(&f.config), "--out", &s(&f.ae)]);
        run_ok(&["train-flow", "--ckpt", &s(&f.ae), "--data", &s(&f.data), "--out", &s(&f.ckpt)]);
        f
    })
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
