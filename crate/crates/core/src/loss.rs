//! Policy-gradient losses over recorded denoising trajectories.
//!
//! The estimator trains on a trajectory's own feedback: each step's recorded
//! commit probabilities give an uncertainty score, a temperature softmax over
//! those scores picks k steps without replacement, and at every picked step
//! the policy is scored on the clean-state tokens whose probability under the
//! behavior policy clears a threshold. A K3 divergence term against a frozen
//! reference regularizes the update. Baseline estimators (whole-sequence,
//! random-mask, exhaustive per-step oracle) share the same per-step math.

use serde::{Deserialize, Serialize};

use crate::diffusion::{reconstruct_state, DenoiseTrajectory, SequenceState, UnmaskEvent};
use crate::error::{Error, Result};
use crate::model::{Model, PositionDistributions, TapedForward};
use crate::rng::Stream;
use crate::scalar::{cast, to_f64, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Probability floor applied before any log or ratio.
pub const P_MIN: f64 = 1e-12;
/// At or below this temperature, step selection is exact top-k.
pub const TAU_DETERMINISTIC: f64 = 1e-6;
/// Softmax weights below this are floored, then renormalized.
pub const WEIGHT_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Rldf,
    FullSeq,
    RandomMask,
    SequentialOracle,
}

impl EstimatorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rldf" => Ok(Self::Rldf),
            "full_seq" => Ok(Self::FullSeq),
            "random_mask" => Ok(Self::RandomMask),
            "sequential_oracle" => Ok(Self::SequentialOracle),
            other => Err(Error::InvalidArgument(format!(
                "unknown estimator {other:?} (want rldf|full_seq|random_mask|sequential_oracle)"
            ))),
        }
    }
}

/// Which tokens a per-step loss scores: the final clean sequence or only the
/// tokens committed at that step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineTarget {
    X0,
    XPrev,
}

impl BaselineTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x0" => Ok(Self::X0),
            "x_prev" => Ok(Self::XPrev),
            other => {
                Err(Error::InvalidArgument(format!("unknown target {other:?} (want x0|x_prev)")))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Sample,
    Token,
}

impl Normalization {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "token" => Ok(Self::Token),
            other => Err(Error::InvalidArgument(format!(
                "unknown normalization {other:?} (want sample|token)"
            ))),
        }
    }
}

/// Per-step uncertainty scores and their softmax sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWeightTable {
    pub uncertainties: Vec<f64>,
    pub weights: Vec<f64>,
    /// Some recorded probability had to be floored at `P_MIN`.
    pub clamped: bool,
}

/// Mean negative log commit probability of one event. Zero probabilities are
/// floored at `P_MIN` and flagged.
pub fn step_uncertainty(event: &UnmaskEvent) -> (f64, bool) {
    assert!(!event.probs.is_empty(), "event has no recorded probabilities");
    let mut clamped = false;
    let sum: f64 = event
        .probs
        .iter()
        .map(|&p| {
            let p = if p < P_MIN {
                clamped = true;
                P_MIN
            } else {
                p.min(1.0)
            };
            -p.ln()
        })
        .sum();
    (sum / event.probs.len() as f64, clamped)
}

/// `w_t ∝ exp(P_t / τ)`, computed with max-subtraction; weights below
/// `WEIGHT_FLOOR` are floored and the vector renormalized.
pub fn step_softmax(p: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    assert!(!p.is_empty());
    let mx = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = p.iter().map(|&x| ((x - mx) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v = (*v / z).max(WEIGHT_FLOOR);
    }
    let z2: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= z2;
    }
    Ok(w)
}

/// Uncertainties and sampling weights for every step of a trajectory,
/// indexed in event order (index 0 is the first, step-T event).
pub fn weight_table(traj: &DenoiseTrajectory, tau: f64) -> Result<StepWeightTable> {
    let mut clamped = false;
    let uncertainties: Vec<f64> = traj
        .events
        .iter()
        .map(|e| {
            let (p, c) = step_uncertainty(e);
            clamped |= c;
            p
        })
        .collect();
    let weights = step_softmax(&uncertainties, tau.max(TAU_DETERMINISTIC))?;
    Ok(StepWeightTable { uncertainties, weights, clamped })
}

/// Draw `min(k, T)` step indices without replacement (successive
/// renormalization). At `tau ≤ TAU_DETERMINISTIC` this is exact top-k by
/// uncertainty with lowest-index tie-breaking. Returned indices are sorted
/// ascending and index the table (0 = first event).
pub fn sample_timesteps(
    table: &StepWeightTable,
    k: usize,
    tau: f64,
    rng: &mut Stream,
) -> Vec<usize> {
    assert!(k >= 1, "k must be at least 1");
    let t = table.weights.len();
    let k = k.min(t);
    if k == t {
        return (0..t).collect();
    }
    if tau <= TAU_DETERMINISTIC {
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| {
            table.uncertainties[b]
                .partial_cmp(&table.uncertainties[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut sel: Vec<usize> = order[..k].to_vec();
        sel.sort_unstable();
        return sel;
    }
    use rand::Rng;
    let mut remaining = table.weights.clone();
    let mut selected = Vec::with_capacity(k);
    for _ in 0..k {
        let z: f64 = remaining.iter().sum();
        let u = rng.random::<f64>() * z;
        let mut acc = 0.0;
        let mut pick = usize::MAX;
        for (i, &w) in remaining.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        if pick == usize::MAX {
            pick = remaining
                .iter()
                .enumerate()
                .rev()
                .find(|(_, &w)| w > 0.0)
                .map(|(i, _)| i)
                .expect("no weight left to sample");
        }
        selected.push(pick);
        remaining[pick] = 0.0;
    }
    selected.sort_unstable();
    selected
}

/// The clean-state tokens kept for scoring at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedCleanState {
    pub kept_positions: Vec<usize>,
    pub kept_tokens: Vec<usize>,
    pub clip_threshold: f64,
}

impl ClippedCleanState {
    pub fn len(&self) -> usize {
        self.kept_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_positions.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.kept_positions.iter().copied().zip(self.kept_tokens.iter().copied()).collect()
    }
}

fn clip_with(
    o0: &SequenceState,
    o_t: &SequenceState,
    prob_of_true: impl Fn(usize) -> f64,
    threshold: f64,
) -> ClippedCleanState {
    let mut kept_positions = Vec::new();
    let mut kept_tokens = Vec::new();
    for i in 0..o_t.len() {
        if o_t.mask_flags[i] && prob_of_true(i) >= threshold {
            kept_positions.push(i);
            kept_tokens.push(o0.response[i]);
        }
    }
    ClippedCleanState { kept_positions, kept_tokens, clip_threshold: threshold }
}

/// Keep the masked-in-`o_t` positions whose true (clean) token clears the
/// probability threshold under the filtering policy's distributions.
pub fn clip_tokens<T: Real>(
    o0: &SequenceState,
    o_t: &SequenceState,
    dists: &PositionDistributions<T>,
    threshold: f64,
) -> ClippedCleanState {
    clip_with(o0, o_t, |i| to_f64(dists.prob(i, o0.response[i])), threshold)
}

/// Values of one evaluated step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub policy_term: f64,
    pub kl_term: f64,
    /// kept tokens / response length.
    pub token_utility: f64,
    pub tokens_used: usize,
}

/// Everything needed to score one step under the live policy, fixed at
/// collection time: the conditioning state, the kept token set, and the
/// behavior policy's log-probabilities of those tokens.
#[derive(Debug, Clone)]
pub struct PlannedStep {
    /// Step label t within the trajectory (T..1); baselines use 1.
    pub step: usize,
    pub o_t: SequenceState,
    pub kept: ClippedCleanState,
    pub old_log_probs: Vec<f64>,
    pub clamped_old: bool,
}

/// Result of planning the steps of one response: plans with nonempty kept
/// sets, plus how many steps were dropped for having nothing to score.
#[derive(Debug, Clone)]
pub struct StepPlans {
    pub steps: Vec<PlannedStep>,
    pub empty_steps: usize,
}

fn floored_ln(p: f64) -> (f64, bool) {
    if p < P_MIN {
        (P_MIN.ln(), true)
    } else {
        (p.min(1.0).ln(), false)
    }
}

/// Log-probabilities of the kept tokens under a distribution set, floored at
/// `P_MIN`.
pub fn kept_log_probs<T: Real>(
    dists: &PositionDistributions<T>,
    kept: &ClippedCleanState,
) -> (Vec<f64>, bool) {
    let mut clamped = false;
    let lp = kept
        .kept_positions
        .iter()
        .zip(kept.kept_tokens.iter())
        .map(|(&pos, &tok)| {
            let (l, c) = floored_ln(to_f64(dists.prob(pos, tok)));
            clamped |= c;
            l
        })
        .collect();
    (lp, clamped)
}

/// Build x0-target plans for the given event indices: conditioning state o_t,
/// clean tokens clipped under the filtering policy, and the filtering
/// policy's log-probabilities. Steps whose kept set is empty are dropped and
/// counted.
pub fn plan_x0_steps<T: Real>(
    traj: &DenoiseTrajectory,
    filter: &Model<T>,
    threshold: f64,
    indices: &[usize],
) -> Result<StepPlans> {
    let total = traj.total_steps();
    let o0 = &traj.final_state;
    let mut steps = Vec::new();
    let mut empty = 0;
    for &idx in indices {
        let step = total - idx;
        let o_t = reconstruct_state(traj, step)?;
        let fwd = filter.forward_state(&o_t)?;
        let lp = fwd.tape.value(fwd.log_probs);
        let kept = clip_with(
            o0,
            &o_t,
            |i| to_f64(lp.get(fwd.prompt_len + i, o0.response[i]).exp()),
            threshold,
        );
        if kept.is_empty() {
            empty += 1;
            continue;
        }
        let mut clamped = false;
        let old_log_probs: Vec<f64> = kept
            .pairs()
            .iter()
            .map(|&(pos, tok)| {
                let raw = to_f64(lp.get(fwd.prompt_len + pos, tok));
                if raw < P_MIN.ln() {
                    clamped = true;
                    P_MIN.ln()
                } else {
                    raw
                }
            })
            .collect();
        steps.push(PlannedStep { step, o_t, kept, old_log_probs, clamped_old: clamped });
    }
    Ok(StepPlans { steps, empty_steps: empty })
}

/// Build x_prev-target plans: each step scores exactly the tokens committed
/// by its event, with no clipping.
pub fn plan_xprev_steps<T: Real>(
    traj: &DenoiseTrajectory,
    filter: &Model<T>,
    indices: &[usize],
) -> Result<StepPlans> {
    let total = traj.total_steps();
    let mut steps = Vec::new();
    for &idx in indices {
        let step = total - idx;
        let ev = &traj.events[idx];
        let o_t = reconstruct_state(traj, step)?;
        let kept = ClippedCleanState {
            kept_positions: ev.positions.clone(),
            kept_tokens: ev
                .positions
                .iter()
                .map(|&p| traj.final_state.response[p])
                .collect(),
            clip_threshold: 0.0,
        };
        let fwd = filter.forward_state(&o_t)?;
        let lp = fwd.tape.value(fwd.log_probs);
        let mut clamped = false;
        let old_log_probs: Vec<f64> = kept
            .pairs()
            .iter()
            .map(|&(pos, tok)| {
                let raw = to_f64(lp.get(fwd.prompt_len + pos, tok));
                if raw < P_MIN.ln() {
                    clamped = true;
                    P_MIN.ln()
                } else {
                    raw
                }
            })
            .collect();
        steps.push(PlannedStep { step, o_t, kept, old_log_probs, clamped_old: clamped });
    }
    Ok(StepPlans { steps, empty_steps: 0 })
}

/// One pseudo-step conditioned on the fully masked response, scoring every
/// position of the clean sequence (no clipping).
pub fn plan_full_seq<T: Real>(o0: &SequenceState, filter: &Model<T>) -> Result<PlannedStep> {
    let o_t = SequenceState::fully_masked(o0.prompt.clone(), o0.len());
    let kept = ClippedCleanState {
        kept_positions: (0..o0.len()).collect(),
        kept_tokens: o0.response.clone(),
        clip_threshold: 0.0,
    };
    let dists = crate::model::Denoiser::distributions(filter, &o_t)?;
    let (old_log_probs, clamped_old) = kept_log_probs(&dists, &kept);
    Ok(PlannedStep { step: 1, o_t, kept, old_log_probs, clamped_old })
}

/// One pseudo-step with a random mask at `mask_rate`, scoring the masked
/// positions. A draw that masks nothing is retried once; `None` means skip.
pub fn plan_random_mask<T: Real>(
    o0: &SequenceState,
    filter: &Model<T>,
    mask_rate: f64,
    rng: &mut Stream,
) -> Result<Option<PlannedStep>> {
    let mut o_t = crate::diffusion::forward_mask(o0, mask_rate, rng)?;
    if o_t.masked_count() == 0 {
        o_t = crate::diffusion::forward_mask(o0, mask_rate, rng)?;
    }
    if o_t.masked_count() == 0 {
        return Ok(None);
    }
    let kept = ClippedCleanState {
        kept_positions: o_t.masked_positions(),
        kept_tokens: o_t.masked_positions().iter().map(|&i| o0.response[i]).collect(),
        clip_threshold: 0.0,
    };
    let dists = crate::model::Denoiser::distributions(filter, &o_t)?;
    let (old_log_probs, clamped_old) = kept_log_probs(&dists, &kept);
    Ok(Some(PlannedStep { step: 1, o_t, kept, old_log_probs, clamped_old }))
}

/// How the per-step policy term is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyMode {
    /// −(1/n)·Σ log φ_θ · Â — the single-update form.
    Reinforce,
    /// −(1/n)·Σ min(r·Â, clip(r, 1−ε, 1+ε)·Â) with r against the stored
    /// behavior log-probabilities.
    Ppo { epsilon: f64 },
}

/// One evaluated step: the taped forward plus scalar roots for the policy
/// term, optional K3 term, and their β-weighted sum.
pub struct StepEval<T> {
    pub fwd: TapedForward<T>,
    pub policy_root: Var,
    pub kl_root: Option<Var>,
    pub combined_root: Var,
    pub loss: StepLoss,
    /// Live-policy probability hit the floor inside a ratio computation.
    pub clamped_theta: bool,
}

/// Score one planned step under the live policy. `ref_log_probs`, when given,
/// adds the K3 term `mean(ρ − log ρ − 1)`, ρ = φ_ref/φ_θ, over the kept
/// positions; `beta` only affects the combined root.
pub fn evaluate_step<T: Real>(
    model: &Model<T>,
    plan: &PlannedStep,
    advantage: f64,
    mode: PolicyMode,
    ref_log_probs: Option<&[f64]>,
    beta: f64,
) -> Result<StepEval<T>> {
    let n = plan.kept.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty kept set; step should have been skipped".into()));
    }
    let l = plan.o_t.len();
    let mut fwd = model.forward_state(&plan.o_t)?;
    let lp = fwd.gather_response_log_probs(&plan.kept.pairs());
    let adv = cast::<T>(advantage);

    // Ratio paths clamp log φ_θ into [ln P_MIN, 0] so ratios stay finite; the
    // clamp blocks the gradient only when the floor is actually hit.
    let ln_floor = cast::<T>(P_MIN.ln());
    let raw_min = fwd
        .tape
        .value(lp)
        .data()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(to_f64(v)));
    let clamped_theta = raw_min < P_MIN.ln();
    let needs_ratio = matches!(mode, PolicyMode::Ppo { .. }) || ref_log_probs.is_some();
    let lp_safe = if needs_ratio { fwd.tape.clip(lp, ln_floor, T::zero()) } else { lp };

    let policy_root = match mode {
        PolicyMode::Reinforce => {
            let mean = fwd.tape.mean_all(lp);
            let neg = fwd.tape.neg(mean);
            fwd.tape.scale(neg, adv)
        }
        PolicyMode::Ppo { epsilon } => {
            assert_eq!(plan.old_log_probs.len(), n, "old log-prob count mismatch");
            let old = fwd.tape.leaf(Tensor::from_vec(
                n,
                1,
                plan.old_log_probs.iter().map(|&x| cast::<T>(x)).collect(),
            ));
            let diff = fwd.tape.sub(lp_safe, old);
            let ratio = fwd.tape.exp(diff);
            let unclipped = fwd.tape.scale(ratio, adv);
            let clipped = fwd.tape.clip(ratio, cast(1.0 - epsilon), cast(1.0 + epsilon));
            let clipped = fwd.tape.scale(clipped, adv);
            let surrogate = fwd.tape.min_pair(unclipped, clipped);
            let mean = fwd.tape.mean_all(surrogate);
            fwd.tape.neg(mean)
        }
    };

    let kl_root = match ref_log_probs {
        Some(refs) => {
            assert_eq!(refs.len(), n, "ref log-prob count mismatch");
            let r = fwd.tape.leaf(Tensor::from_vec(
                n,
                1,
                refs.iter().map(|&x| cast::<T>(x)).collect(),
            ));
            let log_rho = fwd.tape.sub(r, lp_safe);
            let rho = fwd.tape.exp(log_rho);
            let diff = fwd.tape.sub(rho, log_rho);
            let k3 = fwd.tape.add_scalar(diff, -T::one());
            Some(fwd.tape.mean_all(k3))
        }
        None => None,
    };

    let combined_root = match kl_root {
        Some(k) => {
            let kb = fwd.tape.scale(k, cast(beta));
            fwd.tape.add(policy_root, kb)
        }
        None => policy_root,
    };

    let policy_term = to_f64(fwd.tape.value(policy_root).item());
    // The K3 mean is nonnegative up to rounding; the recorded value is
    // floored at zero while the gradient uses the raw node.
    let kl_term = kl_root.map(|k| to_f64(fwd.tape.value(k).item()).max(0.0)).unwrap_or(0.0);
    Ok(StepEval {
        fwd,
        policy_root,
        kl_root,
        combined_root,
        loss: StepLoss {
            policy_term,
            kl_term,
            token_utility: n as f64 / l as f64,
            tokens_used: n,
        },
        clamped_theta,
    })
}

/// REINFORCE step loss on an explicit kept set (behavior policy = live
/// policy, single update).
pub fn step_loss_reinforce<T: Real>(
    model: &Model<T>,
    o_t: &SequenceState,
    kept: &ClippedCleanState,
    advantage: f64,
) -> Result<StepEval<T>> {
    let plan = PlannedStep {
        step: 1,
        o_t: o_t.clone(),
        kept: kept.clone(),
        old_log_probs: vec![0.0; kept.len()],
        clamped_old: false,
    };
    evaluate_step(model, &plan, advantage, PolicyMode::Reinforce, None, 0.0)
}

/// PPO step loss with explicit behavior log-probabilities.
pub fn step_loss_ppo<T: Real>(
    model: &Model<T>,
    o_t: &SequenceState,
    kept: &ClippedCleanState,
    old_log_probs: &[f64],
    advantage: f64,
    epsilon: f64,
) -> Result<StepEval<T>> {
    let plan = PlannedStep {
        step: 1,
        o_t: o_t.clone(),
        kept: kept.clone(),
        old_log_probs: old_log_probs.to_vec(),
        clamped_old: false,
    };
    evaluate_step(model, &plan, advantage, PolicyMode::Ppo { epsilon }, None, 0.0)
}

/// Standalone K3 divergence term over a kept set; differentiable through the
/// live policy only.
pub fn kl_k3<T: Real>(
    model: &Model<T>,
    o_t: &SequenceState,
    kept: &ClippedCleanState,
    ref_log_probs: &[f64],
) -> Result<StepEval<T>> {
    let plan = PlannedStep {
        step: 1,
        o_t: o_t.clone(),
        kept: kept.clone(),
        old_log_probs: vec![0.0; kept.len()],
        clamped_old: false,
    };
    // Â = 0 zeroes the policy term, leaving the combined root = β·KL with β=1.
    evaluate_step(model, &plan, 0.0, PolicyMode::Reinforce, Some(ref_log_probs), 1.0)
}

/// Scalar K3 value for a probability ratio ρ = p_ref / p_θ.
pub fn k3(rho: f64) -> f64 {
    rho - rho.ln() - 1.0
}

/// Sample-level objective: mean over responses of the per-response mean of
/// `policy + β·kl` over its evaluated steps. Responses with no evaluated
/// steps contribute zero but still count toward the group size.
pub fn aggregate_sample_level(per_response: &[Vec<StepLoss>], beta: f64) -> f64 {
    let g = per_response.len();
    if g == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for steps in per_response {
        if steps.is_empty() {
            continue;
        }
        let s: f64 = steps.iter().map(|l| l.policy_term + beta * l.kl_term).sum();
        total += s / steps.len() as f64;
    }
    total / g as f64
}

/// Token-level objective: every kept token weighs the same, normalizing by
/// the total kept-token count across the whole group.
pub fn aggregate_token_level(per_response: &[Vec<StepLoss>], beta: f64) -> f64 {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for steps in per_response {
        for l in steps {
            total += l.tokens_used as f64 * (l.policy_term + beta * l.kl_term);
            tokens += l.tokens_used;
        }
    }
    if tokens == 0 {
        0.0
    } else {
        total / tokens as f64
    }
}

/// Gradient weights w_{b,t} such that Σ w_{b,t}·(policy+β·kl)_{b,t} equals
/// the chosen aggregate.
pub fn aggregation_weights(norm: Normalization, per_response: &[Vec<StepLoss>]) -> Vec<Vec<f64>> {
    let g = per_response.len();
    match norm {
        Normalization::Sample => per_response
            .iter()
            .map(|steps| {
                let w = if steps.is_empty() {
                    0.0
                } else {
                    1.0 / (g as f64 * steps.len() as f64)
                };
                vec![w; steps.len()]
            })
            .collect(),
        Normalization::Token => {
            let total: usize =
                per_response.iter().flat_map(|s| s.iter().map(|l| l.tokens_used)).sum();
            per_response
                .iter()
                .map(|steps| {
                    steps
                        .iter()
                        .map(|l| {
                            if total == 0 {
                                0.0
                            } else {
                                l.tokens_used as f64 / total as f64
                            }
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// Whole-sequence baseline: one pass conditioned on the fully masked
/// response, scoring every position.
pub fn loss_full_seq<T: Real>(
    model: &Model<T>,
    filter: &Model<T>,
    o0: &SequenceState,
    advantage: f64,
    mode: PolicyMode,
) -> Result<StepEval<T>> {
    let plan = plan_full_seq(o0, filter)?;
    evaluate_step(model, &plan, advantage, mode, None, 0.0)
}

/// Random-mask baseline: score the masked positions of one random corruption
/// of the clean sequence. `None` means the draw (after one retry) masked
/// nothing and the sample is skipped.
pub fn loss_random_mask<T: Real>(
    model: &Model<T>,
    filter: &Model<T>,
    o0: &SequenceState,
    mask_rate: f64,
    advantage: f64,
    mode: PolicyMode,
    rng: &mut Stream,
) -> Result<Option<StepEval<T>>> {
    match plan_random_mask(o0, filter, mask_rate, rng)? {
        Some(plan) => Ok(Some(evaluate_step(model, &plan, advantage, mode, None, 0.0)?)),
        None => Ok(None),
    }
}

/// Outcome of an exhaustive (or subsampled) per-step loss over a trajectory.
pub struct TrajectoryLoss<T> {
    pub steps: Vec<StepEval<T>>,
    /// Mean policy term over evaluated steps (0 when none survive).
    pub value: f64,
    pub empty_steps: usize,
}

fn eval_plans<T: Real>(
    model: &Model<T>,
    plans: StepPlans,
    advantage: f64,
    mode: PolicyMode,
) -> Result<TrajectoryLoss<T>> {
    let mut steps = Vec::with_capacity(plans.steps.len());
    for plan in &plans.steps {
        steps.push(evaluate_step(model, plan, advantage, mode, None, 0.0)?);
    }
    let value = if steps.is_empty() {
        0.0
    } else {
        steps.iter().map(|s| s.loss.policy_term).sum::<f64>() / steps.len() as f64
    };
    Ok(TrajectoryLoss { steps, value, empty_steps: plans.empty_steps })
}

/// Exact reference: iterate every step of the trajectory. `X0` scores the
/// clipped clean state (the same per-step math as the weighted estimator);
/// `XPrev` scores only each step's own committed tokens, unclipped.
pub fn loss_sequential_oracle<T: Real>(
    model: &Model<T>,
    filter: &Model<T>,
    traj: &DenoiseTrajectory,
    advantage: f64,
    mode: PolicyMode,
    threshold: f64,
    target: BaselineTarget,
) -> Result<TrajectoryLoss<T>> {
    let all: Vec<usize> = (0..traj.total_steps()).collect();
    let plans = match target {
        BaselineTarget::X0 => plan_x0_steps(traj, filter, threshold, &all)?,
        BaselineTarget::XPrev => plan_xprev_steps(traj, filter, &all)?,
    };
    eval_plans(model, plans, advantage, mode)
}

/// The weighted estimator over one trajectory: build the step-weight table,
/// draw `k` steps without replacement, clip the clean state at each selected
/// step, and average the per-step policy terms.
pub fn loss_rldf<T: Real>(
    model: &Model<T>,
    filter: &Model<T>,
    traj: &DenoiseTrajectory,
    advantage: f64,
    mode: PolicyMode,
    k: usize,
    tau: f64,
    threshold: f64,
    rng: &mut Stream,
) -> Result<(TrajectoryLoss<T>, StepWeightTable, Vec<usize>)> {
    let table = weight_table(traj, tau)?;
    let selected = sample_timesteps(&table, k, tau, rng);
    let plans = plan_x0_steps(traj, filter, threshold, &selected)?;
    let out = eval_plans(model, plans, advantage, mode)?;
    Ok((out, table, selected))
}
