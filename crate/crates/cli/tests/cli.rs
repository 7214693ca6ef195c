//! End-to-end checks of the binary: exit codes, output files, and the
//! shipped config files.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_margingate"))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Tiny geometry so the full diagnose finishes in well under a second.
const TINY: &str = "model.layers = 2\n\
                    model.heads = 2\n\
                    model.d_model = 16\n\
                    model.vocab = 64\n\
                    model.max_positions = 32\n\
                    model.mlp_mult = 2\n\
                    model.seed = 3\n\
                    model.twin_scale = 0.03125\n\
                    corpus.prompt_count = 6\n\
                    corpus.prompt_len = 6\n\
                    corpus.prompt_len_min = 6\n\
                    corpus.decode_cap = 4\n\
                    corpus.seed = 11\n\
                    batch.sizes = 2,4\n\
                    gate.tau = 0.05\n";

#[test]
fn shipped_default_config_matches_builtin_defaults() {
    let text = std::fs::read_to_string(configs_dir().join("default.cfg")).unwrap();
    let cfg = margingate::config::RunConfig::parse(&text).unwrap();
    assert_eq!(cfg, margingate::config::RunConfig::default());
}

#[test]
fn shipped_hetero_config_parses_and_mixes_lengths() {
    let text = std::fs::read_to_string(configs_dir().join("hetero.cfg")).unwrap();
    let cfg = margingate::config::RunConfig::parse(&text).unwrap();
    cfg.validate().unwrap();
    assert!(cfg.corpus.prompt_len_min < cfg.corpus.prompt_len);
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.layers = twelve\n").unwrap();
    let out = bin()
        .args(["diagnose", "--config", cfg.to_str().unwrap()])
        .args(["--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.depth = 4\n").unwrap();
    let out = bin()
        .args(["gen-corpus", "--config", cfg.to_str().unwrap()])
        .args(["--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_error_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_corpus_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = bin()
        .args(["diagnose", "--config", cfg.to_str().unwrap()])
        .args(["--out", dir.path().join("empty").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-corpus"));
}

#[test]
fn gen_corpus_then_diagnose_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    for cmd in ["gen-corpus", "diagnose"] {
        let out = bin()
            .args([cmd, "--config", cfg.to_str().unwrap()])
            .args(["--out", dir.path().to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{cmd} failed");
    }
    for name in ["corpus.txt", "flip_rate.csv", "recall.csv", "diagnose.manifest.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("diagnose.manifest.json")).unwrap())
            .unwrap();
    assert!(manifest["summary"]["flip_rate"].is_number());
    assert_eq!(manifest["command"], "diagnose");
}

#[test]
fn seed_flag_overrides_corpus_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, seed) in [(&out_a, "11"), (&out_b, "12")] {
        let output = bin()
            .args(["gen-corpus", "--config", cfg.to_str().unwrap()])
            .args(["--out", out.to_str().unwrap(), "--seed", seed])
            .output()
            .unwrap();
        assert!(output.status.success());
    }
    let a = std::fs::read(out_a.join("corpus.txt")).unwrap();
    let b = std::fs::read(out_b.join("corpus.txt")).unwrap();
    assert_ne!(a, b, "different seeds should change the corpus");
}
