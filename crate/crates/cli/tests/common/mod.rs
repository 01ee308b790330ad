//! Shared fixtures for the command-line tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use phmn_core::corpus::write_sessions;
use phmn_core::synth::{persona_sessions, SynthConfig};

/// Small model and fast training, suitable for a few hundred steps.
pub const SMALL_RUN: &str = r#"
[corpus]
min_utts = 5
min_turns = 3
max_turns = 3
history_cap = 20
max_len = 8

[model]
d_w = 16
context_filters = 16
history_filters = 4
heads = 2
d_h = 16
agg_conv1_filters = 8
agg_conv2_filters = 8

[train]
batch_size = 32
lr0 = 0.001
eval_every = 100
log_every = 50
"#;

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    /// Temporary directory holding `sessions.jsonl` and `run.toml`.
    pub fn new(sessions: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let s = persona_sessions(&SynthConfig {
            sessions,
            seed,
            ..Default::default()
        });
        let mut buf = Vec::new();
        write_sessions(&mut buf, &s).unwrap();
        fs::write(dir.path().join("sessions.jsonl"), buf).unwrap();
        fs::write(dir.path().join("run.toml"), SMALL_RUN).unwrap();
        Self { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn p(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    pub fn read(&self, rel: &str) -> Vec<u8> {
        fs::read(self.path(rel)).unwrap()
    }

    pub fn corpus(&self, out: &str) -> i32 {
        phmn(&["build-corpus", "--sessions", &self.p("sessions.jsonl"), "--config", &self.p("run.toml"), "--seed", "7", "--out", &self.p(out)])
    }

    pub fn tfidf(&self, corpus: &str, out: &str) -> i32 {
        phmn(&["build-tfidf", "--histories", &self.p(&format!("{corpus}/histories.jsonl")), "--out", &self.p(out)])
    }

    /// Corpus, tf-idf and `extra` training flags into `out`.
    pub fn train(&self, out: &str, extra: &[&str]) -> i32 {
        let mut args = vec![
            "train".to_string(),
            "--corpus".into(),
            self.p("corpus"),
            "--tfidf".into(),
            self.p("tfidf"),
            "--config".into(),
            self.p("run.toml"),
            "--out".into(),
            self.p(out),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        phmn(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }

    pub fn evaluate(&self, ckpt: &str, out: &str) -> i32 {
        phmn(&["evaluate", "--checkpoint", &self.p(ckpt), "--test", &self.p("corpus"), "--tfidf", &self.p("tfidf"), "--out", &self.p(out)])
    }
}

pub fn phmn(args: &[&str]) -> i32 {
    phmn_cli::dispatch(std::iter::once("phmn").chain(args.iter().copied()))
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}
