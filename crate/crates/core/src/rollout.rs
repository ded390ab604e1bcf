//! Group rollouts, rewards, and group-relative advantages.
//!
//! For each task, G responses are generated under the behavior policy, each
//! from its own labeled random stream so reseeding one trajectory never
//! perturbs another. Rewards are normalized within the group to advantages
//! with a floored standard deviation, and groups with zero reward variance
//! are dropped — they carry no learning signal.

use crate::diffusion::{decode, DecodeConfig, DenoiseTrajectory};
use crate::error::Result;
use crate::model::{Denoiser, SamplingConfig};
use crate::rng::Seeder;
use crate::scalar::Real;
use crate::tasks::TaskInstance;

pub const DEFAULT_STD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub task: TaskInstance,
    pub trajectories: Vec<DenoiseTrajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// G independent decodes of one task. Rewards and advantages start empty;
/// callers score and normalize afterwards.
pub fn rollout_group<T: Real, D: Denoiser<T>>(
    model_old: &D,
    task: &TaskInstance,
    g: usize,
    decode_cfg: &DecodeConfig,
    sampling: &SamplingConfig,
    seeder: &Seeder,
    label_prefix: &str,
) -> Result<RolloutGroup> {
    assert!(g >= 2, "group size must be at least 2");
    let mut trajectories = Vec::with_capacity(g);
    for b in 0..g {
        let mut rng = seeder.stream(&format!("{label_prefix}/traj{b}"));
        let traj = decode(
            model_old,
            &task.prompt,
            task.response_len,
            decode_cfg,
            sampling,
            &mut rng,
        )?;
        trajectories.push(traj);
    }
    Ok(RolloutGroup {
        task: task.clone(),
        trajectories,
        rewards: Vec::new(),
        advantages: Vec::new(),
    })
}

/// Fill in rewards: incomplete trajectories score 0, everything else goes to
/// the task verifier.
pub fn score_group(group: &mut RolloutGroup) {
    group.rewards = group
        .trajectories
        .iter()
        .map(|t| {
            if t.incomplete {
                0.0
            } else {
                group.task.reward(&t.final_state.response)
            }
        })
        .collect();
}

/// Â_b = (r_b − μ) / max(σ, floor) with population σ.
pub fn normalize_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    assert!(rewards.len() >= 2, "need at least two rewards");
    let n = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(std_floor);
    rewards.iter().map(|r| (r - mu) / denom).collect()
}

/// Keep a group only if its rewards actually vary.
pub fn filter_group(group: &RolloutGroup) -> bool {
    let Some(&first) = group.rewards.first() else {
        return false;
    };
    group.rewards.iter().any(|&r| r != first)
}
