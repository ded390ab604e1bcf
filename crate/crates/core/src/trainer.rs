//! Training loops: masked-LM pretraining, the outer RL iteration
//! (rollout → reward → advantage → step sampling → update), and evaluation.

use serde::{Deserialize, Serialize};

use crate::diffusion::{decode, DecodeConfig, UnmaskStrategy};
use crate::error::{Error, Result};
use crate::logs::TrajectoryRecord;
use crate::loss::{
    aggregation_weights, evaluate_step, plan_full_seq, plan_random_mask, plan_x0_steps,
    plan_xprev_steps, sample_timesteps, weight_table, BaselineTarget, EstimatorKind,
    Normalization, PlannedStep, PolicyMode, StepLoss, StepPlans, P_MIN,
};
use crate::model::{Denoiser, MlmOutcome, Model, SamplingConfig};
use crate::optim::{clip_grad_norm, Optimizer};
use crate::rng::Seeder;
use crate::rollout::{
    filter_group, normalize_advantages, rollout_group, score_group, RolloutGroup,
};
use crate::scalar::{cast, to_f64, Real};
use crate::tasks::{generate, TaskFamily, TaskInstance, TaskShape};

/// Hyperparameters of the outer RL loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Responses per task (G).
    pub group_size: usize,
    /// Tasks per outer step.
    pub rollout_batch: usize,
    /// Steps sampled per response (capped at the trajectory length).
    pub k_steps: usize,
    /// Inner gradient iterations (N). N = 1 uses the REINFORCE form.
    pub inner_iters: usize,
    pub tau_sample: f64,
    pub epsilon: f64,
    pub clip_threshold: f64,
    pub beta: f64,
    pub std_floor: f64,
    pub lr: f64,
    /// May be infinite to disable clipping.
    pub max_grad_norm: f64,
    pub total_steps: usize,
    pub estimator: EstimatorKind,
    pub target: BaselineTarget,
    pub normalization: Normalization,
    /// Masking rate of the random-mask estimator.
    pub mask_rate: f64,
    pub decode: DecodeConfig,
    pub sampling: SamplingConfig,
    /// Checkpoint cadence in outer steps (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            rollout_batch: 8,
            k_steps: 16,
            inner_iters: 1,
            tau_sample: 1.0,
            epsilon: 0.2,
            clip_threshold: 0.2,
            beta: 0.01,
            std_floor: crate::rollout::DEFAULT_STD_FLOOR,
            lr: 1e-3,
            max_grad_norm: 1.0,
            total_steps: 200,
            estimator: EstimatorKind::Rldf,
            target: BaselineTarget::X0,
            normalization: Normalization::Sample,
            mask_rate: 0.5,
            decode: DecodeConfig::default(),
            sampling: SamplingConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Every violation, prefixed by the offending key.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.group_size < 2 {
            v.push(format!("group_size: must be ≥ 2 (got {})", self.group_size));
        }
        if self.rollout_batch == 0 {
            v.push("rollout_batch: must be ≥ 1".into());
        }
        if self.k_steps == 0 {
            v.push("k_steps: must be ≥ 1".into());
        }
        if self.inner_iters == 0 {
            v.push("inner_iters: must be ≥ 1".into());
        }
        if !(self.tau_sample > 0.0) {
            v.push(format!("tau_sample: must be > 0 (got {})", self.tau_sample));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            v.push(format!("epsilon: must be in (0, 1) (got {})", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.clip_threshold) {
            v.push(format!("clip_threshold: must be in [0, 1] (got {})", self.clip_threshold));
        }
        if !(self.beta >= 0.0) {
            v.push(format!("beta: must be ≥ 0 (got {})", self.beta));
        }
        if !(self.std_floor > 0.0) {
            v.push(format!("std_floor: must be > 0 (got {})", self.std_floor));
        }
        if !(self.lr > 0.0) {
            v.push(format!("lr: must be > 0 (got {})", self.lr));
        }
        if !(self.max_grad_norm > 0.0) {
            v.push(format!("max_grad_norm: must be > 0 (got {})", self.max_grad_norm));
        }
        if !(0.0 < self.mask_rate && self.mask_rate <= 1.0) {
            v.push(format!("mask_rate: must be in (0, 1] (got {})", self.mask_rate));
        }
        match self.decode.validate() {
            Ok(()) => {}
            Err(Error::Config(inner)) => v.extend(inner),
            Err(e) => v.push(format!("decode: {e}")),
        }
        if let Err(e) = self.sampling.validate() {
            v.push(format!("sampling: {e}"));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    fn policy_mode(&self) -> PolicyMode {
        if self.inner_iters == 1 {
            PolicyMode::Reinforce
        } else {
            PolicyMode::Ppo { epsilon: self.epsilon }
        }
    }
}

/// Live policy plus the two frozen copies the objective needs.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    /// Behavior snapshot, refreshed once per outer step.
    pub model_old: Model<T>,
    /// Frozen reference; never updated after construction.
    pub model_ref: Model<T>,
    pub step: usize,
    pub optimizer: Optimizer<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, optimizer: Optimizer<T>) -> Self {
        let model_old = model.clone();
        let model_ref = model.clone();
        Self { model, model_old, model_ref, step: 0, optimizer }
    }
}

/// One metrics record per outer step, flagged even when skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub policy_loss: f64,
    pub kl: f64,
    /// Pre-clip gradient norm of the first inner iteration.
    pub grad_norm: f64,
    pub token_utility: f64,
    pub groups_retained: usize,
    pub steps_sampled: usize,
    pub flags: Vec<String>,
}

impl StepMetrics {
    fn empty(step: usize, mean_reward: f64, flags: Vec<String>) -> Self {
        Self {
            step,
            mean_reward,
            loss: 0.0,
            policy_loss: 0.0,
            kl: 0.0,
            grad_norm: 0.0,
            token_utility: 0.0,
            groups_retained: 0,
            steps_sampled: 0,
            flags,
        }
    }
}

/// A response's evaluated material within one outer step: its fixed plans,
/// advantage, and frozen reference log-probabilities per plan.
struct ResponseWork {
    plans: Vec<PlannedStep>,
    ref_log_probs: Vec<Vec<f64>>,
    advantage: f64,
}

fn plan_response<T: Real>(
    cfg: &TrainConfig,
    model_old: &Model<T>,
    group: &RolloutGroup,
    b: usize,
    seeder: &Seeder,
    label: &str,
    flags: &mut Flags,
) -> Result<Vec<PlannedStep>> {
    let traj = &group.trajectories[b];
    let plans: StepPlans = match cfg.estimator {
        EstimatorKind::Rldf => {
            let table = weight_table(traj, cfg.tau_sample)?;
            if table.clamped {
                flags.prob_clamped = true;
            }
            let mut rng = seeder.stream(&format!("{label}/select"));
            let sel = sample_timesteps(&table, cfg.k_steps, cfg.tau_sample, &mut rng);
            plan_x0_steps(traj, model_old, cfg.clip_threshold, &sel)?
        }
        EstimatorKind::SequentialOracle => {
            let all: Vec<usize> = (0..traj.total_steps()).collect();
            match cfg.target {
                BaselineTarget::X0 => {
                    plan_x0_steps(traj, model_old, cfg.clip_threshold, &all)?
                }
                BaselineTarget::XPrev => plan_xprev_steps(traj, model_old, &all)?,
            }
        }
        EstimatorKind::FullSeq => StepPlans {
            steps: vec![plan_full_seq(&traj.final_state, model_old)?],
            empty_steps: 0,
        },
        EstimatorKind::RandomMask => {
            let mut rng = seeder.stream(&format!("{label}/mask"));
            match plan_random_mask(&traj.final_state, model_old, cfg.mask_rate, &mut rng)? {
                Some(p) => StepPlans { steps: vec![p], empty_steps: 0 },
                None => StepPlans { steps: Vec::new(), empty_steps: 1 },
            }
        }
    };
    flags.empty_steps += plans.empty_steps;
    if plans.steps.iter().any(|p| p.clamped_old) {
        flags.prob_clamped = true;
    }
    Ok(plans.steps)
}

#[derive(Default)]
struct Flags {
    prob_clamped: bool,
    empty_steps: usize,
    nonfinite: bool,
    all_filtered: bool,
}

impl Flags {
    fn render(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.all_filtered {
            out.push("all_groups_filtered".to_string());
        }
        if self.nonfinite {
            out.push("nonfinite_loss_skipped".to_string());
        }
        if self.prob_clamped {
            out.push("prob_clamped".to_string());
        }
        if self.empty_steps > 0 {
            out.push(format!("empty_steps:{}", self.empty_steps));
        }
        out
    }
}

/// One full outer iteration: snapshot the behavior policy, roll out groups,
/// score and filter them, fix step plans and reference log-probabilities,
/// then run N inner gradient iterations. Metrics (loss, gradient norm, …)
/// are those of the first inner iteration, before any update applies.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    tasks: &[TaskInstance],
    cfg: &TrainConfig,
    seeder: &Seeder,
) -> Result<StepMetrics> {
    train_step_logged(state, tasks, cfg, seeder, None)
}

/// [`train_step`] that also records every rollout (retained or filtered) into
/// `sink`, labeled with the decode stream that produced it.
pub fn train_step_logged<T: Real>(
    state: &mut TrainState<T>,
    tasks: &[TaskInstance],
    cfg: &TrainConfig,
    seeder: &Seeder,
    mut sink: Option<&mut Vec<TrajectoryRecord>>,
) -> Result<StepMetrics> {
    assert!(!tasks.is_empty(), "empty task batch");
    let step = state.step;
    let mut flags = Flags::default();

    state.model_old = state.model.clone();

    let mut groups = Vec::with_capacity(tasks.len());
    for (j, task) in tasks.iter().enumerate() {
        let label = format!("rl/step{step}/task{j}");
        let mut group = rollout_group(
            &state.model_old,
            task,
            cfg.group_size,
            &cfg.decode,
            &cfg.sampling,
            seeder,
            &label,
        )?;
        score_group(&mut group);
        if let Some(sink) = sink.as_deref_mut() {
            for (b, traj) in group.trajectories.iter().enumerate() {
                sink.push(TrajectoryRecord::from_trajectory(
                    traj,
                    seeder.master(),
                    &format!("{label}/traj{b}"),
                ));
            }
        }
        groups.push((j, group));
    }

    let all_rewards: Vec<f64> =
        groups.iter().flat_map(|(_, g)| g.rewards.iter().copied()).collect();
    let mean_reward = all_rewards.iter().sum::<f64>() / all_rewards.len() as f64;

    let mut retained: Vec<(usize, RolloutGroup)> = Vec::new();
    for (j, mut group) in groups {
        if filter_group(&group) {
            group.advantages = normalize_advantages(&group.rewards, cfg.std_floor);
            retained.push((j, group));
        }
    }
    let groups_retained = retained.len();
    if retained.is_empty() {
        flags.all_filtered = true;
        state.step += 1;
        return Ok(StepMetrics::empty(step, mean_reward, flags.render()));
    }

    // Fix everything the inner iterations must not move: plans (kept sets,
    // behavior log-probs) and reference log-probs.
    let mut work: Vec<Vec<ResponseWork>> = Vec::with_capacity(groups_retained);
    for (j, group) in &retained {
        let mut responses = Vec::with_capacity(cfg.group_size);
        for b in 0..cfg.group_size {
            let label = format!("rl/step{step}/task{j}/traj{b}");
            let plans =
                plan_response(cfg, &state.model_old, group, b, seeder, &label, &mut flags)?;
            let mut ref_log_probs = Vec::with_capacity(plans.len());
            for plan in &plans {
                let dists = state.model_ref.distributions(&plan.o_t)?;
                let (lp, clamped) = crate::loss::kept_log_probs(&dists, &plan.kept);
                flags.prob_clamped |= clamped;
                ref_log_probs.push(lp);
            }
            responses.push(ResponseWork {
                plans,
                ref_log_probs,
                advantage: group.advantages[b],
            });
        }
        work.push(responses);
    }

    let mode = cfg.policy_mode();
    let n_groups = work.len();
    let mut first = None;
    for inner in 0..cfg.inner_iters {
        let mut grads = state.model.params.zeros_like();
        let mut per_group_losses: Vec<Vec<Vec<StepLoss>>> = Vec::with_capacity(n_groups);
        let mut evals = Vec::new();
        for responses in &work {
            let mut per_response = Vec::with_capacity(responses.len());
            for rw in responses {
                let mut losses = Vec::with_capacity(rw.plans.len());
                for (plan, refs) in rw.plans.iter().zip(rw.ref_log_probs.iter()) {
                    let eval = evaluate_step(
                        &state.model,
                        plan,
                        rw.advantage,
                        mode,
                        Some(refs),
                        cfg.beta,
                    )?;
                    flags.prob_clamped |= eval.clamped_theta;
                    losses.push(eval.loss);
                    evals.push(eval);
                }
                per_response.push(losses);
            }
            per_group_losses.push(per_response);
        }

        // Batch objective = mean over retained groups of the per-group
        // aggregate; gradient weights reproduce it exactly.
        let mut loss = 0.0;
        let mut policy_loss = 0.0;
        let mut kl = 0.0;
        let mut utility = 0.0;
        let mut steps_sampled = 0usize;
        let mut eval_iter = evals.iter();
        for per_response in &per_group_losses {
            let weights = aggregation_weights(cfg.normalization, per_response);
            for (losses, ws) in per_response.iter().zip(weights.iter()) {
                for (l, &w) in losses.iter().zip(ws.iter()) {
                    let eval = eval_iter.next().expect("eval/loss mismatch");
                    let w = w / n_groups as f64;
                    loss += w * (l.policy_term + cfg.beta * l.kl_term);
                    policy_loss += w * l.policy_term;
                    kl += w * l.kl_term;
                    utility += l.token_utility;
                    steps_sampled += 1;
                    eval.fwd.accumulate_gradients(eval.combined_root, cast(w), &mut grads);
                }
            }
        }
        let token_utility =
            if steps_sampled == 0 { 0.0 } else { utility / steps_sampled as f64 };

        let pre_clip = to_f64(clip_grad_norm(&mut grads, cast(cfg.max_grad_norm)));
        if inner == 0 {
            first = Some((loss, policy_loss, kl, pre_clip, token_utility, steps_sampled));
        }
        if !loss.is_finite() || !grads.all_finite() {
            flags.nonfinite = true;
            break;
        }
        state.optimizer.step(&mut state.model.params, &grads);
    }

    let (loss, policy_loss, kl, grad_norm, token_utility, steps_sampled) =
        first.expect("at least one inner iteration");
    state.step += 1;
    Ok(StepMetrics {
        step,
        mean_reward,
        loss,
        policy_loss,
        kl,
        grad_norm,
        token_utility,
        groups_retained,
        steps_sampled,
        flags: flags.render(),
    })
}

/// Deterministic task batch: families rotate per slot, instances come from
/// one labeled stream.
pub fn batch_tasks(
    families: &[TaskFamily],
    shape: &TaskShape,
    count: usize,
    seeder: &Seeder,
    label: &str,
) -> Vec<TaskInstance> {
    assert!(!families.is_empty(), "no task families given");
    let mut rng = seeder.stream(label);
    (0..count)
        .flat_map(|j| generate(families[j % families.len()], shape, 1, &mut rng))
        .collect()
}

/// Masked-LM pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub families: Vec<TaskFamily>,
    pub shape: TaskShape,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            families: vec![TaskFamily::Addition],
            shape: TaskShape::default(),
        }
    }
}

impl PretrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size: must be ≥ 1".into());
        }
        if !(self.lr > 0.0) {
            v.push(format!("lr: must be > 0 (got {})", self.lr));
        }
        if self.families.is_empty() {
            v.push("families: must name at least one task family".into());
        }
        v
    }
}

/// Masked-LM training on gold task sequences: each batch element draws a
/// fresh task and a uniform masking ratio in (0, 1]. Returns the per-step
/// mean losses.
pub fn pretrain<T: Real>(
    model: &mut Model<T>,
    cfg: &PretrainConfig,
    seeder: &Seeder,
) -> Result<Vec<f64>> {
    if !cfg.violations().is_empty() {
        return Err(Error::Config(cfg.violations()));
    }
    let mut optimizer = Optimizer::adam(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        use rand::Rng;
        let tasks =
            batch_tasks(&cfg.families, &cfg.shape, cfg.batch_size, seeder, &format!("pretrain/tasks/step{s}"));
        let mut rng = seeder.stream(&format!("pretrain/mask/step{s}"));
        let mut grads = model.params.zeros_like();
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let mut outcomes = Vec::new();
        for task in &tasks {
            let t_ratio = 1.0 - rng.random::<f64>();
            match model.mlm_loss(&task.gold_state(), t_ratio, &mut rng)? {
                MlmOutcome::Skipped => {}
                MlmOutcome::Loss(l) => {
                    loss_sum += to_f64(l.fwd.tape.value(l.root).item());
                    used += 1;
                    outcomes.push(l);
                }
            }
        }
        if used > 0 {
            let w = cast::<T>(1.0 / used as f64);
            for l in &outcomes {
                l.fwd.accumulate_gradients(l.root, w, &mut grads);
            }
            optimizer.step(&mut model.params, &grads);
        }
        trace.push(if used == 0 { 0.0 } else { loss_sum / used as f64 });
    }
    Ok(trace)
}

/// Mean masked-LM loss over a fixed state set with masking draws taken from
/// one stream; no parameter updates.
pub fn mlm_eval<T: Real>(
    model: &Model<T>,
    states: &[crate::diffusion::SequenceState],
    seeder: &Seeder,
    label: &str,
) -> Result<f64> {
    use rand::Rng;
    let mut rng = seeder.stream(label);
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in states {
        let t_ratio = 1.0 - rng.random::<f64>();
        if let MlmOutcome::Loss(l) = model.mlm_loss(s, t_ratio, &mut rng)? {
            sum += to_f64(l.fwd.tape.value(l.root).item());
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidState("every evaluation draw masked nothing".into()));
    }
    Ok(sum / n as f64)
}

/// One row of the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub family: TaskFamily,
    pub strategy: UnmaskStrategy,
    pub max_steps: usize,
    pub n_tasks: usize,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn family_mean(
        &self,
        family: TaskFamily,
        strategy: UnmaskStrategy,
        max_steps: usize,
    ) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.family == family && r.strategy == strategy && r.max_steps == max_steps)
            .map(|r| r.mean_reward)
    }
}

/// Mean reward of argmax decodes under exactly one decode configuration.
/// Forced-completion finals are verified like any other decode.
pub fn eval_reward<T: Real>(
    model: &Model<T>,
    tasks: &[TaskInstance],
    decode_cfg: &DecodeConfig,
    seeder: &Seeder,
    label: &str,
) -> Result<f64> {
    assert!(!tasks.is_empty());
    let sampling = SamplingConfig::argmax();
    let mut total = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        let mut rng = seeder.stream(&format!("{label}/task{i}"));
        let traj =
            decode(model, &task.prompt, task.response_len, decode_cfg, &sampling, &mut rng)?;
        total += task.reward(&traj.final_state.response);
    }
    Ok(total / tasks.len() as f64)
}

/// Exploration-free evaluation grid: for every family present in the task
/// set, both unmasking strategies at step budgets L/2, L, and 2L (L = that
/// family's response length). Static budgets get k_per_step = ceil(L / budget).
pub fn evaluate<T: Real>(
    model: &Model<T>,
    tasks: &[TaskInstance],
    base: &DecodeConfig,
    seeder: &Seeder,
    label: &str,
) -> Result<EvalReport> {
    let mut families: Vec<TaskFamily> = Vec::new();
    for t in tasks {
        if !families.contains(&t.family) {
            families.push(t.family);
        }
    }
    let mut rows = Vec::new();
    for family in families {
        let subset: Vec<TaskInstance> =
            tasks.iter().filter(|t| t.family == family).cloned().collect();
        let l = subset[0].response_len;
        for strategy in [UnmaskStrategy::StaticTopk, UnmaskStrategy::DynamicThreshold] {
            for max_steps in [l.div_ceil(2).max(1), l, 2 * l] {
                let cfg = DecodeConfig {
                    strategy,
                    k_per_step: l.div_ceil(max_steps).max(1),
                    threshold: base.threshold,
                    block_size: base.block_size,
                    max_steps,
                };
                let mean_reward = eval_reward(
                    model,
                    &subset,
                    &cfg,
                    seeder,
                    &format!("{label}/{}/{:?}/{max_steps}", family.name(), strategy),
                )?;
                rows.push(EvalRow {
                    family,
                    strategy,
                    max_steps,
                    n_tasks: subset.len(),
                    mean_reward,
                });
            }
        }
    }
    Ok(EvalReport { rows })
}

/// Probability floor flag threshold re-exported for metrics consumers.
pub const PROB_FLOOR: f64 = P_MIN;
