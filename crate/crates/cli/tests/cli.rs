use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_perturbench"));
    c.env("RUST_LOG", "error");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn perturbench")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL_SYNTH: &str = r#"{
  "n_batches": 4,
  "cells_per_batch": 120,
  "n_perturbations": 24,
  "n_genes": 50,
  "latent_dim": 6,
  "n_modules": 3,
  "n_silent_targets": 8,
  "seed": 3
}"#;

fn make_bundle(dir: &Path) {
    fs::write(dir.join("synth.json"), SMALL_SYNTH).unwrap();
    let o = run(&["synth", "--config", "synth.json", "--out", "bundle"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "metadata.tsv", "expression.f32", "true_links.tsv", "silent_targets.txt"] {
        assert!(dir.join("bundle").join(f).exists(), "{f}");
    }
}

fn eval_config(dir: &Path, out: &str) -> String {
    let cfg = format!(
        r#"{{
  "bundle": "bundle",
  "databases": ["bundle/true_links.tsv"],
  "embeddings": ["pca", "random", "true_latent"],
  "seeds": [0, 1],
  "pca_dim": 12,
  "random_dim": 12,
  "output_dir": "{out}",
  "probe": {{"epochs": 15, "warmup_epochs": 2}},
  "recon": {{"epochs": 4, "warmup_epochs": 1}},
  "consistency": {{"min_null": 5}}
}}"#
    );
    let path = format!("{out}.json");
    fs::write(dir.join(&path), cfg).unwrap();
    path
}

#[test]
fn synth_then_full_eval_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_bundle(dir);
    let cfg = eval_config(dir, "rep");
    let o = run(&["eval", "all", "--config", &cfg], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let tsv = fs::read_to_string(dir.join("rep/report.tsv")).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "embedding\tpost_processing\ttask\tmetric\tmean\tstd\tn_seeds\tselected\terror"
    );
    for emb in ["pca", "random", "true_latent"] {
        for task in ["mixing", "probe", "consistency", "knn", "recall", "recon"] {
            for pp in ["raw", "center", "center_scale", "tvn", "best"] {
                let prefix = format!("{emb}\t{pp}\t{task}\t");
                assert!(tsv.lines().any(|l| l.starts_with(&prefix)), "missing {prefix:?}");
            }
        }
    }
    assert!(dir.join("rep/report_per_seed.tsv").exists());
    assert!(dir.join("rep/report.json").exists());
}

#[test]
fn repeated_eval_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_bundle(dir);
    for out in ["a", "b"] {
        let cfg = eval_config(dir, out);
        let o = run(&["eval", "all", "--config", &cfg], dir);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["report.tsv", "report_per_seed.tsv", "report.json"] {
        assert_eq!(fs::read(dir.join("a").join(f)).unwrap(), fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn cell_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_bundle(dir);
    // eight silent targets cannot meet the default minimum null size
    let o = run(
        &["eval", "consistency", "--bundle", "bundle", "--embedding", "true_latent", "--seed", "0", "--out", "r"],
        dir,
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = fs::read_to_string(dir.join("r/report.tsv")).unwrap();
    assert!(tsv.contains("insufficient data"));

    let o = run(
        &[
            "eval", "consistency", "--bundle", "bundle", "--embedding", "true_latent", "--seed", "0", "--min-null", "5",
            "--out", "r2",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn fatal_problems_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&run(&["validate", "nope"], dir)), 1);
    assert_eq!(code(&run(&["eval", "mixing", "--bundle", "nope"], dir)), 1);
    fs::write(dir.join("bad.json"), r#"{"tasks": [], "bundle": "x"}"#).unwrap();
    make_bundle(dir);
    assert_eq!(code(&run(&["eval", "all", "--config", "bad.json", "--bundle", "bundle"], dir)), 1);
    fs::write(dir.join("typo.json"), r#"{"bundel": "bundle"}"#).unwrap();
    assert_eq!(code(&run(&["eval", "mixing", "--config", "typo.json"], dir)), 1);
}

#[test]
fn pipeline_subcommands_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_bundle(dir);

    let o = run(&["preprocess", "bundle", "--out", "filtered", "--min-counts", "1000"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["embed", "filtered", "--method", "pca", "--dim", "8"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["postprocess", "filtered", "--embedding", "pca", "--method", "tvn"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["validate", "filtered"], dir);
    assert_eq!(code(&o), 0);
    let summary = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(summary.contains("embedding\tpca\t8"), "{summary}");
    assert!(summary.contains("embedding\tpca.tvn\t8"), "{summary}");

    let o = run(&["split", "filtered", "--kind", "recon", "--out", "recon.json", "--seed", "4"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("recon.json")).unwrap()).unwrap();
    assert!(!split["held_out_perturbations"].as_array().unwrap().is_empty());

    let o = run(
        &[
            "eval", "mixing", "--bundle", "filtered", "--embedding", "pca.tvn", "--post-processing", "raw", "--seed",
            "0", "--out", "m",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["report", "m/report.json"], dir);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout), fs::read_to_string(dir.join("m/report.tsv")).unwrap());
}

#[test]
fn thread_cap_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_bundle(dir);
    for (threads, out) in [("1", "t1"), ("3", "t3")] {
        let o = bin()
            .args(["eval", "knn", "--bundle", "bundle", "--embedding", "true_latent", "--seed", "0", "--out", out])
            .env("PERTURBENCH_THREADS", threads)
            .current_dir(dir)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(dir.join("t1/report.tsv")).unwrap(), fs::read(dir.join("t3/report.tsv")).unwrap());
    let o = bin().args(["validate", "bundle"]).env("PERTURBENCH_THREADS", "lots").current_dir(dir).output().unwrap();
    assert_eq!(code(&o), 1);
}
