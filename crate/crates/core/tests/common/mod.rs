#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossvae::data::{read_jsonl, CorpusRecord};
use crossvae::model::Model;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// The 32-pair toy corpus: 8 answers with 4 questions each.
pub fn toy_records() -> Vec<CorpusRecord> {
    read_jsonl(&fixture("toy_corpus.jsonl")).expect("toy corpus")
}

pub fn cvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cvae")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a run config with small dimensions and returns its path.
pub fn write_run_config(dir: &Path, variant: &str, epochs: usize, dev: Option<&Path>) -> PathBuf {
    let mut paths = serde_json::json!({
        "train": dir.join("train.jsonl"),
        "vocab": dir.join("vocab.json"),
        "out_dir": dir.join("run"),
    });
    if let Some(d) = dev {
        paths["dev"] = serde_json::json!(d);
    }
    let cfg = serde_json::json!({
        "schema_version": 1,
        "seed": 7,
        "paths": paths,
        "model": {
            "embed_dim": 8,
            "hidden_dim": 8,
            "latent_dim": 4,
            "attention_hops": 2,
            "attention_dim": 8,
            "variant": variant,
            "max_len": 32
        },
        "train": {"epochs": epochs, "learning_rate": 0.003, "batch_size": 8},
        "objective": {"beta_max": 0.01}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

pub fn param_bits(m: &Model<f32>) -> Vec<(String, Vec<u32>)> {
    m.params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}
