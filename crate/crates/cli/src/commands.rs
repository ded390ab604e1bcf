//! The four subcommands. All artifact writes that must never be observed
//! half-done (checkpoints, manifests, CSVs) go through temp-file + rename;
//! metrics and trajectory logs are append streams flushed per record.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mdrl_core::analysis::{
    bin_probabilities, collect_token_stats, correlate, default_bin_edges, fmt_sig6,
    render_csv, timestep_profile, utility_report, LossReport, TokenStat,
};
use mdrl_core::checkpoint;
use mdrl_core::config::{
    load_config, read_json, write_atomic, write_json_atomic, DoneMarker, RunConfig,
    RunManifest,
};
use mdrl_core::diffusion::UnmaskStrategy;
use mdrl_core::logs::{read_jsonl, write_jsonl_line, TrajectoryRecord};
use mdrl_core::model::Model;
use mdrl_core::optim::Optimizer;
use mdrl_core::rng::Seeder;
use mdrl_core::trainer::{
    batch_tasks, evaluate, pretrain as run_pretrain, train_step_logged, StepMetrics,
    TrainState,
};
use mdrl_core::{Error, Result};

use crate::{AnalyzeArgs, EvalArgs, RunArgs};

fn apply_overrides(cfg: &mut RunConfig, seed: Option<u64>, out: Option<&PathBuf>) {
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(o) = out {
        cfg.run.out_dir = o.display().to_string();
    }
}

fn strategy_name(s: UnmaskStrategy) -> &'static str {
    match s {
        UnmaskStrategy::StaticTopk => "static_topk",
        UnmaskStrategy::DynamicThreshold => "dynamic_threshold",
    }
}

/// Dataset provenance, written next to the metrics so a run's tasks can be
/// regenerated without the config file.
fn write_dataset_manifest(
    path: &Path,
    cfg: &RunConfig,
    count: usize,
) -> Result<()> {
    let families: Vec<&str> = cfg.task.families.iter().map(|f| f.name()).collect();
    write_json_atomic(
        path,
        &serde_json::json!({
            "seed": cfg.run.seed,
            "families": families,
            "count": count,
            "max_len": cfg.model.max_len,
            "response_len": cfg.task.response_len,
            "word_len": cfg.task.word_len,
        }),
    )
}

pub fn pretrain(args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args.seed, args.out.as_ref());
    let out = PathBuf::from(&cfg.run.out_dir);
    fs::create_dir_all(&out)?;

    let pcfg = cfg.pretrain_config();
    let mut artifacts = BTreeMap::new();
    artifacts.insert("checkpoint".into(), "pretrained.ckpt".into());
    artifacts.insert("trace".into(), "pretrain_trace.csv".into());
    artifacts.insert("dataset".into(), "pretrain_dataset.json".into());
    write_json_atomic(
        &out.join("pretrain_manifest.json"),
        &RunManifest::new(cfg.clone(), artifacts),
    )?;
    write_dataset_manifest(
        &out.join("pretrain_dataset.json"),
        &cfg,
        pcfg.steps * pcfg.batch_size,
    )?;

    let mut model = match &args.resume {
        Some(path) => checkpoint::load_model::<f64>(path)?,
        None => Model::init(cfg.model_config())?,
    };
    let seeder = Seeder::new(cfg.run.seed);
    let trace = run_pretrain(&mut model, &pcfg, &seeder)?;

    checkpoint::save(&out.join("pretrained.ckpt"), &model.cfg, &model.params)?;
    let rows: Vec<Vec<String>> = trace
        .iter()
        .enumerate()
        .map(|(i, &loss)| vec![i.to_string(), fmt_sig6(loss)])
        .collect();
    write_atomic(
        &out.join("pretrain_trace.csv"),
        render_csv(&["step", "mlm_loss"], &rows).as_bytes(),
    )?;
    write_json_atomic(
        &out.join("pretrain_done.json"),
        &DoneMarker {
            finished_unix: mdrl_core::config::unix_now(),
            final_checkpoint: "pretrained.ckpt".into(),
        },
    )?;
    println!(
        "{}",
        serde_json::json!({
            "steps": trace.len(),
            "final_mlm_loss": trace.last().copied().unwrap_or(f64::NAN),
        })
    );
    Ok(())
}

pub fn train_rl(args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args.seed, args.out.as_ref());
    let out = PathBuf::from(&cfg.run.out_dir);
    fs::create_dir_all(&out)?;

    let start = match &args.resume {
        Some(path) => path.clone(),
        None => out.join("pretrained.ckpt"),
    };
    let model = checkpoint::load_model::<f64>(&start)?;

    let tcfg = cfg.train_config();
    let mut artifacts = BTreeMap::new();
    artifacts.insert("metrics".into(), "metrics.jsonl".into());
    artifacts.insert("trajectories".into(), "trajectories.jsonl".into());
    artifacts.insert("checkpoint".into(), "rl_final.ckpt".into());
    artifacts.insert("dataset".into(), "rl_dataset.json".into());
    write_json_atomic(
        &out.join("rl_manifest.json"),
        &RunManifest::new(cfg.clone(), artifacts),
    )?;
    write_dataset_manifest(
        &out.join("rl_dataset.json"),
        &cfg,
        tcfg.total_steps * tcfg.rollout_batch,
    )?;

    let seeder = Seeder::new(cfg.run.seed);
    let families = cfg.task.families.clone();
    let shape = cfg.task_shape();
    let mut state = TrainState::new(model, Optimizer::adam(tcfg.lr));

    let mut metrics_file = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut traj_file = BufWriter::new(File::create(out.join("trajectories.jsonl"))?);
    let mut sink: Vec<TrajectoryRecord> = Vec::new();

    for step in 0..tcfg.total_steps {
        let tasks = batch_tasks(
            &families,
            &shape,
            tcfg.rollout_batch,
            &seeder,
            &format!("rl/tasks/step{step}"),
        );
        sink.clear();
        let metrics = train_step_logged(&mut state, &tasks, &tcfg, &seeder, Some(&mut sink))?;
        for rec in &sink {
            write_jsonl_line(&mut traj_file, rec)?;
        }
        traj_file.flush()?;
        write_jsonl_line(&mut metrics_file, &metrics)?;
        metrics_file.flush()?;
        println!(
            "{}",
            serde_json::to_string(&metrics)
                .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?
        );
        if tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 {
            checkpoint::save(
                &out.join(format!("rl_step{}.ckpt", step + 1)),
                &state.model.cfg,
                &state.model.params,
            )?;
        }
    }

    checkpoint::save(&out.join("rl_final.ckpt"), &state.model.cfg, &state.model.params)?;
    write_json_atomic(
        &out.join("rl_done.json"),
        &DoneMarker {
            finished_unix: mdrl_core::config::unix_now(),
            final_checkpoint: "rl_final.ckpt".into(),
        },
    )?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args.seed, args.out.as_ref());
    let out = PathBuf::from(&cfg.run.out_dir);
    fs::create_dir_all(&out)?;

    let model = checkpoint::load_model::<f64>(&args.checkpoint)?;
    let seeder = Seeder::new(cfg.run.seed);
    let tasks = batch_tasks(
        &cfg.task.families,
        &cfg.task_shape(),
        cfg.task.eval_count,
        &seeder,
        "eval/tasks",
    );
    let report = evaluate(&model, &tasks, &cfg.decode_config(), &seeder, "eval")?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.family.name().to_string(),
                strategy_name(r.strategy).to_string(),
                r.max_steps.to_string(),
                r.n_tasks.to_string(),
                fmt_sig6(r.mean_reward),
            ]
        })
        .collect();
    let csv = render_csv(&["family", "strategy", "max_steps", "n_tasks", "mean_reward"], &rows);
    write_atomic(&out.join("eval.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let model = checkpoint::load_model::<f64>(&args.checkpoint)?;
    let records: Vec<TrajectoryRecord> = read_jsonl(&args.log)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: empty trajectory log",
            args.log.display()
        )));
    }
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args.log.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
    };
    fs::create_dir_all(&out)?;

    let mut stats: Vec<TokenStat> = Vec::new();
    let mut profile_points: Vec<(f64, f64)> = Vec::new();
    for rec in &records {
        let traj = rec.to_trajectory()?;
        let total = traj.total_steps() as f64;
        let traj_stats = collect_token_stats(&model, &traj)?;
        profile_points.extend(traj_stats.iter().map(|s| (s.step as f64 / total, s.prob)));
        stats.extend(traj_stats);
    }

    let (pearson, spearman) = correlate(&stats)?;
    let hist = bin_probabilities(&stats, &default_bin_edges())?;
    write_atomic(
        &out.join("stats.csv"),
        render_csv(
            &["pearson", "spearman", "top_fraction", "n_events"],
            &[vec![
                fmt_sig6(pearson),
                fmt_sig6(spearman),
                fmt_sig6(hist.top_fraction),
                stats.len().to_string(),
            ]],
        )
        .as_bytes(),
    )?;

    let hist_rows: Vec<Vec<String>> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            vec![fmt_sig6(hist.edges[i]), fmt_sig6(hist.edges[i + 1]), c.to_string()]
        })
        .collect();
    write_atomic(
        &out.join("histogram.csv"),
        render_csv(&["bin_lo", "bin_hi", "count"], &hist_rows).as_bytes(),
    )?;

    let profile_rows: Vec<Vec<String>> = timestep_profile(&profile_points)
        .iter()
        .map(|b| {
            vec![
                b.bucket.to_string(),
                fmt_sig6(b.t_lo),
                fmt_sig6(b.t_hi),
                fmt_sig6(b.q1),
                fmt_sig6(b.median),
                fmt_sig6(b.q3),
                b.count.to_string(),
            ]
        })
        .collect();
    write_atomic(
        &out.join("profile.csv"),
        render_csv(&["bucket", "t_lo", "t_hi", "q1", "median", "q3", "count"], &profile_rows)
            .as_bytes(),
    )?;

    if let Some(metrics_path) = &args.metrics {
        let manifest_path = metrics_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("rl_manifest.json");
        let manifest: RunManifest = read_json(&manifest_path)?;
        let target = serde_json::to_value(manifest.config.rl.target)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| "x0".into());
        let clipped = manifest.config.rl.clip_threshold > 0.0;
        let steps: Vec<StepMetrics> = read_jsonl(metrics_path)?;
        // Skipped steps carry zero grad/loss placeholders; they would dilute
        // the averages.
        let reports: Vec<LossReport> = steps
            .iter()
            .filter(|m| m.steps_sampled > 0)
            .map(|m| LossReport {
                target: target.clone(),
                clipped,
                grad_norm: m.grad_norm,
                loss: m.loss,
                token_utility: m.token_utility,
            })
            .collect();
        let rows: Vec<Vec<String>> = utility_report(&reports)
            .iter()
            .map(|r| {
                vec![
                    r.target.clone(),
                    r.clipped.to_string(),
                    r.count.to_string(),
                    fmt_sig6(r.mean_grad_norm),
                    fmt_sig6(r.mean_loss),
                    fmt_sig6(r.mean_token_utility),
                ]
            })
            .collect();
        write_atomic(
            &out.join("utility.csv"),
            render_csv(
                &["target", "clipped", "count", "mean_grad_norm", "mean_loss", "mean_token_utility"],
                &rows,
            )
            .as_bytes(),
        )?;
    }
    Ok(())
}
