//! Forward masking and iterative unmasking over token sequences.
//!
//! A generation starts from an all-MASK response and commits tokens over a
//! series of steps, either a fixed top-k per step or everything above a
//! confidence threshold, working block by block left to right. Every commit
//! is recorded as an [`UnmaskEvent`] so any intermediate state can be rebuilt
//! exactly for later scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_token, Denoiser, PositionDistributions, SamplingConfig};
use crate::rng::Stream;
use crate::scalar::Real;
use crate::vocab::MASK;

/// A prompt plus a partially committed response.
///
/// `mask_flags[i]` is true exactly when `response[i]` holds the MASK id; the
/// response length never changes over a trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceState {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub mask_flags: Vec<bool>,
}

impl SequenceState {
    pub fn new(prompt: Vec<usize>, response: Vec<usize>, mask_flags: Vec<bool>) -> Result<Self> {
        let s = Self { prompt, response, mask_flags };
        s.check()?;
        Ok(s)
    }

    /// Clean state: nothing masked.
    pub fn from_clean(prompt: Vec<usize>, response: Vec<usize>) -> Self {
        let flags = vec![false; response.len()];
        Self { prompt, response, mask_flags: flags }
    }

    pub fn fully_masked(prompt: Vec<usize>, len: usize) -> Self {
        Self { prompt, response: vec![MASK; len], mask_flags: vec![true; len] }
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }

    pub fn is_complete(&self) -> bool {
        self.masked_count() == 0
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask_flags[i]).collect()
    }

    /// prompt ++ response, the model's input sequence.
    pub fn full_ids(&self) -> Vec<usize> {
        let mut ids = self.prompt.clone();
        ids.extend_from_slice(&self.response);
        ids
    }

    pub fn check(&self) -> Result<()> {
        if self.response.len() != self.mask_flags.len() {
            return Err(Error::InvalidState("response/mask_flags length mismatch".into()));
        }
        for (i, (&tok, &m)) in self.response.iter().zip(self.mask_flags.iter()).enumerate() {
            if m != (tok == MASK) {
                return Err(Error::InvalidState(format!(
                    "mask flag disagrees with token at position {i}"
                )));
            }
        }
        Ok(())
    }
}

/// One unmasking commit: the step index (counting down to 1), the response
/// positions committed, and the model probability of each committed token at
/// commit time.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmaskEvent {
    pub step: usize,
    pub positions: Vec<usize>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskStrategy {
    StaticTopk,
    DynamicThreshold,
}

impl UnmaskStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static_topk" => Ok(Self::StaticTopk),
            "dynamic_threshold" => Ok(Self::DynamicThreshold),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?} (want static_topk|dynamic_threshold)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: UnmaskStrategy,
    pub k_per_step: usize,
    pub threshold: f64,
    pub block_size: usize,
    pub max_steps: usize,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.k_per_step == 0 {
            bad.push("decode.k_per_step must be >= 1".to_string());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            bad.push("decode.threshold must lie in (0, 1)".to_string());
        }
        if self.block_size == 0 {
            bad.push("decode.block_size must be >= 1".to_string());
        }
        if self.max_steps == 0 {
            bad.push("decode.max_steps must be >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: UnmaskStrategy::DynamicThreshold,
            k_per_step: 1,
            threshold: 0.9,
            block_size: 32,
            max_steps: 64,
        }
    }
}

/// A complete generation: events ordered step T down to 1, the clean final
/// state, and the decoding configuration that produced it. Replaying the
/// events from all-MASK reconstructs `final_state` exactly. `incomplete`
/// marks runs that hit the step budget; those carry one extra forced event
/// that argmax-commits the remainder so every trajectory ends clean.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseTrajectory {
    pub events: Vec<UnmaskEvent>,
    pub final_state: SequenceState,
    pub decode_config: DecodeConfig,
    pub incomplete: bool,
}

impl DenoiseTrajectory {
    /// Number of denoising steps T (= number of events).
    pub fn total_steps(&self) -> usize {
        self.events.len()
    }

    /// Event carrying step index `t` (events are stored T..1).
    pub fn event_at_step(&self, t: usize) -> Option<&UnmaskEvent> {
        let total = self.total_steps();
        if t == 0 || t > total {
            return None;
        }
        Some(&self.events[total - t])
    }

    pub fn check(&self) -> Result<()> {
        let total = self.total_steps();
        let mut seen = vec![false; self.final_state.len()];
        for (j, ev) in self.events.iter().enumerate() {
            if ev.step != total - j {
                return Err(Error::InvalidState(format!(
                    "event {j} has step {} (want {})",
                    ev.step,
                    total - j
                )));
            }
            if ev.positions.is_empty() || ev.positions.len() != ev.probs.len() {
                return Err(Error::InvalidState(format!("event {j} positions/probs malformed")));
            }
            for &p in &ev.positions {
                if p >= seen.len() || seen[p] {
                    return Err(Error::InvalidState(format!(
                        "position {p} repeated or out of range"
                    )));
                }
                seen[p] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidState("events do not cover every position".into()));
        }
        self.final_state.check()
    }
}

/// Independently replace each response token by MASK with probability
/// `t_ratio`; the prompt is untouched.
pub fn forward_mask(x0: &SequenceState, t_ratio: f64, rng: &mut Stream) -> Result<SequenceState> {
    if !(0.0..=1.0).contains(&t_ratio) {
        return Err(Error::InvalidArgument(format!("t_ratio {t_ratio} outside [0, 1]")));
    }
    if !x0.is_complete() {
        return Err(Error::InvalidArgument("forward_mask input must be a clean state".into()));
    }
    use rand::Rng;
    let mut out = x0.clone();
    for i in 0..out.len() {
        if rng.random::<f64>() < t_ratio {
            out.response[i] = MASK;
            out.mask_flags[i] = true;
        }
    }
    Ok(out)
}

/// Rebuild the intermediate state o_t: commits from events with step > t are
/// applied, everything unmasked at steps ≤ t is still MASK. t = T gives the
/// all-MASK start, t = 0 the clean final state.
pub fn reconstruct_state(traj: &DenoiseTrajectory, t: usize) -> Result<SequenceState> {
    let total = traj.total_steps();
    if t > total {
        return Err(Error::InvalidArgument(format!("step {t} outside [0, {total}]")));
    }
    let mut state =
        SequenceState::fully_masked(traj.final_state.prompt.clone(), traj.final_state.len());
    for ev in &traj.events {
        if ev.step > t {
            for &p in &ev.positions {
                state.response[p] = traj.final_state.response[p];
                state.mask_flags[p] = false;
            }
        }
    }
    Ok(state)
}

/// Positions of the lowest-index block that still contains a mask.
fn active_block(state: &SequenceState, block_size: usize) -> Option<(usize, usize)> {
    let l = state.len();
    let mut b = 0;
    while b * block_size < l {
        let lo = b * block_size;
        let hi = ((b + 1) * block_size).min(l);
        if (lo..hi).any(|i| state.mask_flags[i]) {
            return Some((lo, hi));
        }
        b += 1;
    }
    None
}

/// Sample a candidate token at every masked in-block position. MASK itself is
/// never a legal commit, so its mass is removed and the row renormalized
/// before sampling.
fn sample_candidates<T: Real>(
    state: &SequenceState,
    dists: &PositionDistributions<T>,
    sampling: &SamplingConfig,
    block: (usize, usize),
    rng: &mut Stream,
) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for i in block.0..block.1 {
        if state.mask_flags[i] {
            let mut row = dists.row(i).to_vec();
            if MASK < row.len() {
                row[MASK] = T::zero();
                let z: T = row.iter().copied().sum();
                if z > T::zero() {
                    for v in row.iter_mut() {
                        *v = *v / z;
                    }
                } else {
                    let u = T::one() / crate::scalar::cast::<T>((row.len() - 1) as f64);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if j == MASK { T::zero() } else { u };
                    }
                }
            }
            let (tok, prob) = sample_token(&row, sampling, rng)?;
            out.push((i, tok, prob));
        }
    }
    Ok(out)
}

fn commit(
    state: &SequenceState,
    chosen: &[(usize, usize, f64)],
) -> (SequenceState, UnmaskEvent) {
    let mut next = state.clone();
    let mut positions = Vec::with_capacity(chosen.len());
    let mut probs = Vec::with_capacity(chosen.len());
    for &(pos, tok, prob) in chosen {
        next.response[pos] = tok;
        next.mask_flags[pos] = false;
        positions.push(pos);
        probs.push(prob);
    }
    (next, UnmaskEvent { step: 0, positions, probs })
}

/// Commit every masked in-block position whose candidate probability is ≥
/// `cfg.threshold` (closed comparison); when none qualifies, commit exactly
/// the single best position (lowest index on ties).
pub fn dynamic_unmask_step<T: Real>(
    state: &SequenceState,
    dists: &PositionDistributions<T>,
    cfg: &DecodeConfig,
    sampling: &SamplingConfig,
    rng: &mut Stream,
) -> Result<(SequenceState, UnmaskEvent)> {
    let block = active_block(state, cfg.block_size)
        .ok_or_else(|| Error::InvalidState("no masked positions".into()))?;
    let cand = sample_candidates(state, dists, sampling, block, rng)?;
    let qualifying: Vec<_> =
        cand.iter().copied().filter(|&(_, _, p)| p >= cfg.threshold).collect();
    let chosen = if qualifying.is_empty() {
        // Strict > keeps the lowest index on ties while scanning ascending.
        let mut best = cand[0];
        for &c in &cand[1..] {
            if c.2 > best.2 {
                best = c;
            }
        }
        vec![best]
    } else {
        qualifying
    };
    Ok(commit(state, &chosen))
}

/// Commit the `k_per_step` masked in-block positions with the highest
/// candidate probability (lowest index on ties).
pub fn static_unmask_step<T: Real>(
    state: &SequenceState,
    dists: &PositionDistributions<T>,
    cfg: &DecodeConfig,
    sampling: &SamplingConfig,
    rng: &mut Stream,
) -> Result<(SequenceState, UnmaskEvent)> {
    let block = active_block(state, cfg.block_size)
        .ok_or_else(|| Error::InvalidState("no masked positions".into()))?;
    let mut cand = sample_candidates(state, dists, sampling, block, rng)?;
    // Stable order: descending probability, ascending position on ties.
    cand.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    cand.truncate(cfg.k_per_step.min(cand.len()));
    cand.sort_by_key(|c| c.0);
    Ok(commit(state, &cand))
}

/// Run a full generation: blocks left to right, unmask steps per `cfg` until
/// the response is clean or `max_steps` is spent. If masks remain after the
/// budget, one extra forced event argmax-commits them and the trajectory is
/// flagged incomplete.
pub fn decode<T: Real, D: Denoiser<T>>(
    model: &D,
    prompt: &[usize],
    response_len: usize,
    cfg: &DecodeConfig,
    sampling: &SamplingConfig,
    rng: &mut Stream,
) -> Result<DenoiseTrajectory> {
    cfg.validate()?;
    if response_len == 0 {
        return Err(Error::InvalidArgument("response_len must be >= 1".into()));
    }
    let mut state = SequenceState::fully_masked(prompt.to_vec(), response_len);
    let mut events: Vec<UnmaskEvent> = Vec::new();
    let mut incomplete = false;

    while !state.is_complete() && events.len() < cfg.max_steps {
        let dists = model.distributions(&state)?;
        let (next, event) = match cfg.strategy {
            UnmaskStrategy::DynamicThreshold => {
                dynamic_unmask_step(&state, &dists, cfg, sampling, rng)?
            }
            UnmaskStrategy::StaticTopk => {
                static_unmask_step(&state, &dists, cfg, sampling, rng)?
            }
        };
        state = next;
        events.push(event);
    }

    if !state.is_complete() {
        incomplete = true;
        let dists = model.distributions(&state)?;
        let argmax = SamplingConfig::argmax();
        let block = (0, state.len());
        let cand = sample_candidates(&state, &dists, &argmax, block, rng)?;
        let (next, event) = commit(&state, &cand);
        state = next;
        events.push(event);
    }

    let total = events.len();
    for (j, ev) in events.iter_mut().enumerate() {
        ev.step = total - j;
    }
    Ok(DenoiseTrajectory { events, final_state: state, decode_config: cfg.clone(), incomplete })
}
