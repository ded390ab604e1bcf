//! Diagnostics over recorded trajectories: commit-probability/entropy
//! correlation, probability histograms, per-step confidence profiles, and
//! token-utility/gradient comparisons across loss configurations.

use serde::{Deserialize, Serialize};

use crate::diffusion::{reconstruct_state, DenoiseTrajectory};
use crate::error::{Error, Result};
use crate::model::{Denoiser, Model};
use crate::scalar::Real;

/// One committed token's diagnostics: where and when it was committed, with
/// what probability, and the full-distribution entropy (nats) at that
/// position under the conditioning state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStat {
    pub position: usize,
    pub step: usize,
    pub prob: f64,
    pub entropy: f64,
}

/// Replay a trajectory under a model: for every event, re-derive the
/// conditioning state and read the entropy at each committed position. The
/// probability is the recorded commit probability.
pub fn collect_token_stats<T: Real>(
    model: &Model<T>,
    traj: &DenoiseTrajectory,
) -> Result<Vec<TokenStat>> {
    let total = traj.total_steps();
    let mut out = Vec::new();
    for (idx, event) in traj.events.iter().enumerate() {
        let step = total - idx;
        let o_t = reconstruct_state(traj, step)?;
        let dists = model.distributions(&o_t)?;
        for (&pos, &prob) in event.positions.iter().zip(event.probs.iter()) {
            out.push(TokenStat { position: pos, step, prob, entropy: dists.entropy(pos) });
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in correlation input".into(),
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Average ranks (1-based); tied values share the mean of their rank range.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // Positions i..=j share the average of ranks i+1..=j+1.
        let r = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson r and Spearman ρ (average-rank ties) between commit probability
/// and entropy.
pub fn correlate(stats: &[TokenStat]) -> Result<(f64, f64)> {
    if stats.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 stats for a correlation (got {})",
            stats.len()
        )));
    }
    let probs: Vec<f64> = stats.iter().map(|s| s.prob).collect();
    let ents: Vec<f64> = stats.iter().map(|s| s.entropy).collect();
    let r = pearson(&probs, &ents)?;
    let rho = pearson(&average_ranks(&probs), &average_ranks(&ents))?;
    Ok((r, rho))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Fraction of inputs with probability ≥ 0.9.
    pub top_fraction: f64,
}

/// The default granularity: {0.0, 0.1, …, 1.0}.
pub fn default_bin_edges() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Counts per probability bin [e_i, e_{i+1}) with the last bin closed;
/// out-of-range values land in the boundary bins so counts always sum to the
/// input size.
pub fn bin_probabilities(stats: &[TokenStat], edges: &[f64]) -> Result<Histogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("bin edges must be strictly increasing".into()));
    }
    let nbins = edges.len() - 1;
    let mut counts = vec![0usize; nbins];
    let mut top = 0usize;
    for s in stats {
        let mut b = nbins - 1;
        for i in 0..nbins {
            if s.prob < edges[i + 1] {
                b = i;
                break;
            }
        }
        counts[b] += 1;
        if s.prob >= 0.9 {
            top += 1;
        }
    }
    let top_fraction = if stats.is_empty() { 0.0 } else { top as f64 / stats.len() as f64 };
    Ok(Histogram { edges: edges.to_vec(), counts, top_fraction })
}

/// One loss configuration's observables, labeled by target and clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub target: String,
    pub clipped: bool,
    pub grad_norm: f64,
    pub loss: f64,
    pub token_utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub target: String,
    pub clipped: bool,
    pub count: usize,
    pub mean_grad_norm: f64,
    pub mean_loss: f64,
    pub mean_token_utility: f64,
}

/// Group reports by (target, clipped) and average each group's observables.
/// Empty input gives an empty table.
pub fn utility_report(reports: &[LossReport]) -> Vec<UtilityRow> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, bool), Vec<&LossReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.target.clone(), r.clipped)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((target, clipped), rs)| {
            let n = rs.len() as f64;
            UtilityRow {
                target,
                clipped,
                count: rs.len(),
                mean_grad_norm: rs.iter().map(|r| r.grad_norm).sum::<f64>() / n,
                mean_loss: rs.iter().map(|r| r.loss).sum::<f64>() / n,
                mean_token_utility: rs.iter().map(|r| r.token_utility).sum::<f64>() / n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBucket {
    pub bucket: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub count: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between closest ranks.
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Commit-probability profile over normalized trajectory progress: points
/// (t/T, prob) are grouped into 20 equal buckets of [0, 1]; each nonempty
/// bucket reports its median and interquartile range.
pub fn timestep_profile(points: &[(f64, f64)]) -> Vec<ProfileBucket> {
    const N: usize = 20;
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); N];
    for &(t, p) in points {
        let b = ((t * N as f64) as usize).min(N - 1);
        buckets[b].push(p);
    }
    buckets
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(i, mut v)| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ProfileBucket {
                bucket: i,
                t_lo: i as f64 / N as f64,
                t_hi: (i + 1) as f64 / N as f64,
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                count: v.len(),
            }
        })
        .collect()
}

/// Decimal with 6 significant digits; plain notation for moderate exponents,
/// scientific otherwise.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..=8).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    }
}

/// Comma-separated table with a header row; fields are pre-rendered strings.
pub fn render_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
