#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hrvvs_cli::RunConfig;

/// A config small enough for a few seconds of CPU per command.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model.height = 64;
    cfg.model.width = 64;
    cfg.train.max_steps = 3;
    cfg.train.t_clip = 2;
    cfg.pretrain.steps = 2;
    cfg.data.synth.resolution = 64;
    cfg.data.synth.videos = 2;
    cfg.data.synth.frames = 4;
    cfg
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

pub fn hrvvs(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_hrvvs")).args(args).output().unwrap();
    out
}

pub fn ok(args: &[&str]) -> String {
    let out = hrvvs(args);
    assert!(
        out.status.success(),
        "hrvvs {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
