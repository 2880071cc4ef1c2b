#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub const TEXT: &str = "a person walks forward then waves";

const TINY: &str = r#"{
  "embedder": {"width": 16, "layers": 1, "heads": 2, "eval_dim": 8, "epochs": 4},
  "vae": {"latent_dim": 8, "width": 16, "layers": 1, "heads": 2, "epochs": 2},
  "denoiser": {"width": 16, "layers": 1, "heads": 2, "epochs": 3}
}"#;

pub struct Fixture {
    pub dir: PathBuf,
    pub corpus: PathBuf,
    pub models: PathBuf,
}

pub fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actionguide")).args(args).output().expect("spawn actionguide")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Corpus and tiny models built through the binary, once per test binary.
pub fn fixture(name: &str) -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let corpus = dir.join("corpus.jsonl");
        let config = dir.join("tiny.json");
        let models = dir.join("models");
        std::fs::write(&config, TINY).unwrap();
        run_ok(&["gen-corpus", "--seed", "3", "--size", "60", "--out", path(&corpus)]);
        run_ok(&["train", "all", "--corpus", path(&corpus), "--config", path(&config), "--out", path(&models)]);
        Fixture { dir, corpus, models }
    })
}
