use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn motionlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motionlab"))
        .args(args)
        .env_remove("MOLINGO_LAB_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = motionlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const AE_CONFIG: &str = "[model]\nhidden = 8\nlatent_dim = 4\n\n[train]\nsteps = 3\nbatch = 4\nwindow = 32\nlog_every = 0\n";
const GEN_CONFIG: &str = "[model]\nlayers = 1\nheads = 2\nwidth = 8\nhead_blocks = 1\nhead_width = 8\nmax_latents = 24\n\n[model.adapter]\ndepth = 1\nheads = 2\nmax_tokens = 8\n\n[train]\nsteps = 3\nbatch = 4\nlog_every = 0\n";
const EVAL_CONFIG: &str = "[model]\nfeature_dim = 8\nhidden = 8\n\n[train]\nsteps = 3\nbatch = 4\nlog_every = 0\n";

fn synth(dir: &TempDir, name: &str, seed: &str) -> PathBuf {
    let out = path(dir, name);
    ok(&["synth-data", "--classes", "5", "--count", "40", "--seed", seed, "--out", s(&out)]);
    out
}

#[test]
fn synth_data_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "a.mcorp", "7");
    let b = synth(&dir, "b.mcorp", "7");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path(&dir, "a.mcorp.manifest.json")).unwrap()).unwrap();
    let other: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path(&dir, "b.mcorp.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["output_hash"], other["output_hash"]);
    assert_eq!(manifest["config_hash"], other["config_hash"]);
    assert_eq!(manifest["seed"], 7);
    let c = synth(&dir, "c.mcorp", "8");
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn generate_without_gen_is_a_usage_error() {
    let out = motionlab(&["generate", "--prompt", "a person walks", "--length", "40", "--ae", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--gen"));
}

#[test]
fn unknown_flags_and_subcommands_exit_2() {
    assert_eq!(motionlab(&["synth-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(motionlab(&["fly"]).status.code(), Some(2));
    assert_eq!(motionlab(&["synth-data", "--out", "x", "--threads", "0"]).status.code(), Some(2));
}

#[test]
fn help_is_available_per_subcommand() {
    for cmd in ["synth-data", "train-ae", "train-gen", "train-eval", "generate", "evaluate", "export-embeddings", "inspect"] {
        let out = ok(&[cmd, "--help"]);
        assert!(out.contains("Usage"), "{cmd}");
    }
}

#[test]
fn missing_and_damaged_inputs_exit_3() {
    let dir = TempDir::new().unwrap();
    let out = motionlab(&["train-ae", "--corpus", s(&path(&dir, "none.mcorp")), "--out", s(&path(&dir, "ae.ckpt"))]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error[io]"), "{stderr}");

    let corpus = synth(&dir, "toy.mcorp", "1");
    let mut bytes = std::fs::read(&corpus).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0xff;
    let damaged = path(&dir, "damaged.mcorp");
    std::fs::write(&damaged, bytes).unwrap();
    let out = motionlab(&["inspect", s(&damaged)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[checksum]"));
}

#[test]
fn bad_config_files_exit_2() {
    let dir = TempDir::new().unwrap();
    let corpus = synth(&dir, "toy.mcorp", "1");
    let config = path(&dir, "ae.toml");
    std::fs::write(&config, "[model]\nwidth_typo = 3\n").unwrap();
    let out = motionlab(&["train-ae", "--corpus", s(&corpus), "--config", s(&config), "--out", s(&path(&dir, "ae.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));
}

#[test]
fn full_pipeline_writes_artifacts_and_manifests() {
    let dir = TempDir::new().unwrap();
    let corpus = synth(&dir, "toy.mcorp", "3");
    let (ae_cfg, gen_cfg, eval_cfg) = (path(&dir, "ae.toml"), path(&dir, "gen.toml"), path(&dir, "eval.toml"));
    std::fs::write(&ae_cfg, AE_CONFIG).unwrap();
    std::fs::write(&gen_cfg, GEN_CONFIG).unwrap();
    std::fs::write(&eval_cfg, EVAL_CONFIG).unwrap();
    let (ae, gen, ev) = (path(&dir, "ae.ckpt"), path(&dir, "gen.ckpt"), path(&dir, "eval.ckpt"));

    ok(&["train-ae", "--variant", "sae", "--config", s(&ae_cfg), "--corpus", s(&corpus), "--out", s(&ae), "--seed", "1"]);
    // Flags override the config file.
    ok(&["train-gen", "--ae", s(&ae), "--corpus", s(&corpus), "--config", s(&gen_cfg), "--steps", "2", "--out", s(&gen)]);
    ok(&["train-eval", "--corpus", s(&corpus), "--config", s(&eval_cfg), "--out", s(&ev)]);

    let inspect = ok(&["inspect", s(&ae)]);
    assert!(inspect.contains("kind: autoencoder"));
    assert!(inspect.contains("\"sae\""));
    assert!(inspect.contains("enc.in.weight"), "{inspect}");
    assert!(inspect.contains("\"seed\": 1"));

    let motion = path(&dir, "motion.mcorp");
    let (csv, svg) = (path(&dir, "joints.csv"), path(&dir, "plot.svg"));
    let args = [
        "generate", "--prompt", "a person jumps", "--length", "37", "--ae", s(&ae), "--gen", s(&gen), "--cfg", "6.0",
        "--seed", "5", "--steps", "4", "--denoise-steps", "3", "--out", s(&motion), "--export-joints", s(&csv),
        "--plot", s(&svg),
    ];
    let stdout = ok(&args);
    assert!(stdout.contains("per sample"));
    let first = std::fs::read(&motion).unwrap();
    ok(&args);
    assert_eq!(first, std::fs::read(&motion).unwrap(), "same seed, same motion");
    let joints = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(joints.lines().count(), 37 * 5);
    assert!(joints.lines().all(|l| l.split(',').count() == 3 && l.split(',').all(|v| v.parse::<f32>().is_ok())));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    let inspect = ok(&["inspect", s(&motion)]);
    assert!(inspect.contains("sequences: 1"));
    assert!(inspect.contains("frames: 37..=37"));

    let report = path(&dir, "report.json");
    ok(&[
        "evaluate", "--gen", s(&gen), "--ae", s(&ae), "--evaluator", s(&ev), "--corpus", s(&corpus), "--runs", "2",
        "--samples", "16", "--pool", "8", "--mmodality-prompts", "2", "--mmodality-repeats", "2", "--steps", "2",
        "--denoise-steps", "2", "--report", s(&report),
    ]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["runs"], 2);
    for k in ["fid", "r_precision_top1", "r_precision_top3", "matching_score", "clip_score", "mmodality"] {
        assert!(r[k]["mean"].is_number(), "{k}");
        assert!(r[k]["half_width"].is_number(), "{k}");
    }
    assert!(r["notes"].as_array().unwrap().len() >= 2);

    for artifact in [&corpus, &ae, &gen, &ev, &motion, &csv, &svg, &report] {
        let m = PathBuf::from(format!("{}.manifest.json", artifact.display()));
        let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&m).unwrap()).unwrap();
        assert!(manifest["output_hash"].as_str().unwrap().len() == 64);
        assert!(manifest["command"].as_str().unwrap().contains("motionlab"));
    }
    let gen_manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path(&dir, "gen.ckpt.manifest.json")).unwrap()).unwrap();
    let inputs: Vec<&str> = gen_manifest["inputs"].as_array().unwrap().iter().map(|p| p[0].as_str().unwrap()).collect();
    assert!(inputs.iter().any(|p| p.ends_with("ae.ckpt")) && inputs.iter().any(|p| p.ends_with("toy.mcorp")));
}

#[test]
fn exported_embeddings_feed_training() {
    let dir = TempDir::new().unwrap();
    let prompts = path(&dir, "prompts.txt");
    std::fs::write(&prompts, "a person walks forward\n\na person squats\na person walks forward\n").unwrap();
    let emb = path(&dir, "prompts.memb");
    let stdout = ok(&["export-embeddings", "--prompts", s(&prompts), "--out", s(&emb)]);
    assert!(stdout.contains("wrote 2 prompt embeddings"));
    let inspect = ok(&["inspect", s(&emb)]);
    assert!(inspect.contains("kind: embeddings"));
    assert!(inspect.contains("\"a person squats\""));

    let corpus = synth(&dir, "toy.mcorp", "2");
    let cfg = path(&dir, "eval.toml");
    std::fs::write(&cfg, EVAL_CONFIG).unwrap();
    let ev = path(&dir, "eval.ckpt");
    ok(&["train-eval", "--corpus", s(&corpus), "--config", s(&cfg), "--embeddings", s(&emb), "--out", s(&ev)]);
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_motionlab"))
        .args(["synth-data", "--count", "4", "--out", s(&path(&dir, "t.mcorp"))])
        .env("MOLINGO_LAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MOLINGO_LAB_THREADS"));
    let out = Command::new(env!("CARGO_BIN_EXE_motionlab"))
        .args(["synth-data", "--count", "4", "--out", s(&path(&dir, "t.mcorp"))])
        .env("MOLINGO_LAB_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
}
