//! End-to-end runs of the installed binary via CARGO_BIN_EXE.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mdrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdrl")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, out_dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        r#"
[run]
out_dir = "{}"
seed = 11
label = "smoke"

[model]
embed_dim = 16
n_layers = 1
n_heads = 2
ff_dim = 24
max_len = 24

[task]
families = ["addition"]
eval_count = 4

[pretrain]
steps = 2
batch_size = 4

[rl]
total_steps = 1
rollout_batch = 2
group_size = 2
k_steps = 4
clip_threshold = 0.0

[decode]
max_steps = 8
{extra}
"#,
        out_dir.display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &out, "");

    let pre = mdrl(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert!(pre.status.success(), "stderr: {}", String::from_utf8_lossy(&pre.stderr));
    for f in ["pretrain_manifest.json", "pretrained.ckpt", "pretrain_trace.csv", "pretrain_done.json"]
    {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let rl = mdrl(&["train-rl", "--config", cfg.to_str().unwrap()]);
    assert!(rl.status.success(), "stderr: {}", String::from_utf8_lossy(&rl.stderr));
    for f in ["rl_manifest.json", "metrics.jsonl", "trajectories.jsonl", "rl_final.ckpt", "rl_done.json"]
    {
        assert!(out.join(f).exists(), "missing {f}");
    }
    // total_steps = 1 ⇒ exactly one metrics record, echoed on stdout too.
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1, "{metrics}");
    let parsed: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(parsed["step"], 0);
    let stdout = String::from_utf8_lossy(&rl.stdout);
    assert_eq!(stdout.lines().count(), 1, "{stdout}");

    let ev = mdrl(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint",
        out.join("rl_final.ckpt").to_str().unwrap()]);
    assert!(ev.status.success(), "stderr: {}", String::from_utf8_lossy(&ev.stderr));
    let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(csv.starts_with("family,strategy,max_steps,n_tasks,mean_reward"), "{csv}");
    assert_eq!(csv.lines().count(), 1 + 6, "one family × 2 strategies × 3 budgets: {csv}");

    let an = mdrl(&["analyze", "--log", out.join("trajectories.jsonl").to_str().unwrap(),
        "--checkpoint", out.join("rl_final.ckpt").to_str().unwrap(),
        "--metrics", out.join("metrics.jsonl").to_str().unwrap()]);
    assert!(an.status.success(), "stderr: {}", String::from_utf8_lossy(&an.stderr));
    for f in ["stats.csv", "histogram.csv", "profile.csv", "utility.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let stats = fs::read_to_string(out.join("stats.csv")).unwrap();
    assert!(stats.starts_with("pearson,spearman,top_fraction,n_events"), "{stats}");
}

#[test]
fn invalid_config_exits_nonzero_with_named_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &out, "\n[sampling]\ntop_p = 1.0\n");
    // Overwrite with a bad value.
    let text = fs::read_to_string(&cfg).unwrap().replace("total_steps = 1", "tau_sample = -1");
    fs::write(&cfg, text).unwrap();

    let rl = mdrl(&["train-rl", "--config", cfg.to_str().unwrap()]);
    assert!(!rl.status.success());
    let stderr = String::from_utf8_lossy(&rl.stderr);
    assert_eq!(stderr.lines().count(), 1, "single-line error: {stderr}");
    let parsed: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(parsed["error"], "config");
    assert!(parsed["message"].as_str().unwrap().contains("tau_sample"), "{stderr}");
    assert!(!out.exists() || !out.join("rl_manifest.json").exists(), "no artifacts on failure");
}

#[test]
fn same_seed_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let cfg = write_config(tmp.path(), &out_a, "");
    assert!(mdrl(&["pretrain", "--config", cfg.to_str().unwrap()]).status.success());
    let ckpt = out_a.join("pretrained.ckpt");

    let out_b = tmp.path().join("b");
    let run = |out: &Path| {
        let r = mdrl(&["train-rl", "--config", cfg.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
            "--resume", ckpt.to_str().unwrap()]);
        assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    };
    run(&out_a);
    run(&out_b);

    let metrics_a = fs::read(out_a.join("metrics.jsonl")).unwrap();
    let metrics_b = fs::read(out_b.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics_a, metrics_b, "metrics must be byte-identical");
    let ckpt_a = fs::read(out_a.join("rl_final.ckpt")).unwrap();
    let ckpt_b = fs::read(out_b.join("rl_final.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "final checkpoints must be bit-identical");
    let traj_a = fs::read(out_a.join("trajectories.jsonl")).unwrap();
    let traj_b = fs::read(out_b.join("trajectories.jsonl")).unwrap();
    assert_eq!(traj_a, traj_b, "trajectory logs must be byte-identical");
}

#[test]
fn missing_checkpoint_is_a_checkpoint_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &out, "");
    let rl = mdrl(&["train-rl", "--config", cfg.to_str().unwrap()]);
    assert!(!rl.status.success());
    let stderr = String::from_utf8_lossy(&rl.stderr);
    let parsed: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(parsed["error"], "checkpoint", "{stderr}");
}
