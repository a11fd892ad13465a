//! End-to-end runs of the `locgen` binary on a miniature configuration:
//! every subcommand, determinism of the written artifacts, and the exit
//! code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn locgen() -> Command {
    Command::new(env!("CARGO_BIN_EXE_locgen"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("locgen-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Miniature but fully functional: 16-pixel scenes, a thin model, a few
/// training steps.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "seed = 5\n\
         data.n_train = 8\n\
         data.n_test = 3\n\
         data.image_size = 16\n\
         data.max_pos = 8\n\
         data.max_neg = 16\n\
         data.target_pos_min = 2\n\
         data.target_pos_max = 6\n\
         data.target_neg_min = 6\n\
         data.target_neg_max = 14\n\
         data.proposal_budget = 2000\n\
         data.anchor_stride = 2\n\
         model.image_size = 16\n\
         model.d_model = 16\n\
         model.n_layers = 1\n\
         model.n_heads = 2\n\
         model.num_bins = 16\n\
         pretrain.steps = 12\n\
         pretrain.batch_size = 4\n\
         pretrain.warmup_steps = 4\n\
         pretrain.eval_every = 6\n\
         pretrain.heldout_cap = 16\n\
         dpo.steps = 4\n\
         dpo.batch_size = 8\n\
         eval.k = 3\n",
    )
    .unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed.\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn pipeline_runs_end_to_end_with_stable_artifacts() {
    let dir = workdir("pipeline");
    let cfg = write_tiny_config(&dir);
    let data = dir.join("data");
    let cfg_arg = cfg.to_str().unwrap();

    let out = run_ok(locgen().args(["--config", cfg_arg, "gen-data", "--out"]).arg(&data));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("train: 8 scenes"), "{stdout}");
    assert!(stdout.contains("lattice"), "{stdout}");

    // Regenerating produces byte-identical datasets.
    let data2 = dir.join("data2");
    run_ok(locgen().args(["--config", cfg_arg, "gen-data", "--out"]).arg(&data2));
    assert_eq!(read(&data.join("scenes.jsonl")), read(&data2.join("scenes.jsonl")));
    assert_eq!(read(&data.join("annotations.jsonl")), read(&data2.join("annotations.jsonl")));

    let run1 = dir.join("run1");
    let out = run_ok(
        locgen().args(["--config", cfg_arg, "train", "--data"]).arg(&data).arg("--out").arg(&run1),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("trained 12 steps"));
    let ckpt = run1.join("model.ckpt");
    assert!(run1.join("pretrain.csv").exists() && run1.join("train_config.json").exists());

    // Retraining reproduces the checkpoint bit for bit.
    let run2 = dir.join("run2");
    run_ok(
        locgen().args(["--config", cfg_arg, "train", "--data"]).arg(&data).arg("--out").arg(&run2),
    );
    assert_eq!(read(&ckpt), read(&run2.join("model.ckpt")));
    assert_eq!(read(&run1.join("pretrain.csv")), read(&run2.join("pretrain.csv")));

    let dpo_dir = dir.join("dpo");
    let out = run_ok(
        locgen()
            .args(["--config", cfg_arg, "dpo", "--data"])
            .arg(&data)
            .arg("--model")
            .arg(&ckpt)
            .arg("--out")
            .arg(&dpo_dir),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("finetuned 4 steps"));
    let dpo_ckpt = dpo_dir.join("model_dpo.ckpt");
    let dpo_csv = fs::read_to_string(dpo_dir.join("dpo.csv")).unwrap();
    assert!(dpo_csv.starts_with("step,dpo_loss,mean_preference_prob,ref_hash\n"));

    let samples = dir.join("samples.jsonl");
    run_ok(
        locgen()
            .args(["--config", cfg_arg, "sample", "--data"])
            .arg(&data)
            .arg("--model")
            .arg(&ckpt)
            .arg("--out")
            .arg(&samples)
            .args(["--k", "3"]),
    );
    let text = fs::read_to_string(&samples).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(!lines.is_empty() && lines.len() % 3 == 0, "{} lines", lines.len());
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    let scene_id = first["scene_id"].as_str().unwrap().to_string();
    let class = first["class"].as_u64().unwrap().to_string();

    // Constrained sampling on one prompt stays inside the region.
    let region_samples = dir.join("region.jsonl");
    run_ok(
        locgen()
            .args(["--config", cfg_arg, "sample", "--data"])
            .arg(&data)
            .arg("--model")
            .arg(&ckpt)
            .arg("--out")
            .arg(&region_samples)
            .args(["--k", "8", "--scene", &scene_id, "--class", &class])
            .args(["--region", "0,8,16,16"]),
    );
    for line in fs::read_to_string(&region_samples).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let bbox = v["bbox"].as_array().unwrap();
        assert!(bbox[1].as_f64().unwrap() >= 8.0, "{line}");
        assert!(bbox[3].as_f64().unwrap() <= 16.0, "{line}");
    }

    let eval1 = dir.join("eval1");
    let out = run_ok(
        locgen()
            .args(["--config", cfg_arg, "eval", "--data"])
            .arg(&data)
            .arg("--model")
            .arg(&ckpt)
            .arg("--out")
            .arg(&eval1)
            .arg("--with-baseline"),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("model: tpr") && stdout.contains("baseline: tpr"), "{stdout}");
    let summary = fs::read_to_string(eval1.join("eval_summary.csv")).unwrap();
    assert!(summary.starts_with("condition,tp,fp,fn,tn,"), "{summary}");
    assert_eq!(summary.lines().count(), 3);
    assert!(eval1.join("eval_per_set.csv").exists());
    assert!(eval1.join("eval_rates.svg").exists());

    let eval2 = dir.join("eval2");
    run_ok(
        locgen()
            .args(["--config", cfg_arg, "eval", "--data"])
            .arg(&data)
            .arg("--model")
            .arg(&ckpt)
            .arg("--out")
            .arg(&eval2)
            .arg("--with-baseline"),
    );
    assert_eq!(read(&eval1.join("eval_summary.csv")), read(&eval2.join("eval_summary.csv")));
    assert_eq!(read(&eval1.join("eval_rates.svg")), read(&eval2.join("eval_rates.svg")));

    let sweep = dir.join("sweep");
    run_ok(
        locgen()
            .args(["--config", cfg_arg, "sweep-k", "--data"])
            .arg(&data)
            .arg("--model")
            .arg(&dpo_ckpt)
            .arg("--out")
            .arg(&sweep)
            .args(["--ks", "1,3"]),
    );
    let csv = fs::read_to_string(sweep.join("sweep_k.csv")).unwrap();
    assert!(csv.starts_with("k,") && csv.lines().count() == 3, "{csv}");

    run_ok(
        locgen()
            .args(["--config", cfg_arg, "sweep-topk", "--data"])
            .arg(&data)
            .arg("--model")
            .arg(&dpo_ckpt)
            .arg("--out")
            .arg(&sweep)
            .args(["--top-ks", "1,4"]),
    );
    let csv = fs::read_to_string(sweep.join("sweep_topk.csv")).unwrap();
    assert!(csv.starts_with("top_k,") && csv.lines().count() == 3, "{csv}");

    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = workdir("errors");
    let out = locgen()
        .args(["--set", "model.dmodel=32", "gen-data", "--out"])
        .arg(dir.join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("model.dmodel"), "{stderr}");

    let out = locgen()
        .args(["eval", "--data"])
        .arg(dir.join("missing"))
        .arg("--model")
        .arg(dir.join("missing.ckpt"))
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Unknown flags are usage errors, not crashes.
    let out = locgen().args(["--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = locgen().args(["--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn violated_invariants_exit_two() {
    let dir = workdir("invariant");
    // A 16-pixel image with a stride-8 anchor lattice has only 81 corner
    // anchors; the default label targets oversaturate it, which the
    // generator must refuse to ship.
    let out = locgen()
        .args([
            "--set",
            "data.image_size=16",
            "--set",
            "data.n_train=2",
            "--set",
            "data.n_test=1",
            "gen-data",
            "--out",
        ])
        .arg(dir.join("data"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    fs::remove_dir_all(&dir).unwrap();
}
