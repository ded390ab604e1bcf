//! Line-delimited JSON logs: trajectory records and generic JSONL helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DecodeConfig, DenoiseTrajectory, SequenceState, UnmaskEvent};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub step: usize,
    pub positions: Vec<usize>,
    /// 32-bit probabilities; JSON round-trips them at 9 significant digits.
    pub probs: Vec<f32>,
}

/// One decoded trajectory as logged: enough to rebuild the trajectory and to
/// reproduce the decode (master seed + stream label).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub prompt: Vec<usize>,
    #[serde(rename = "final")]
    pub final_ids: Vec<usize>,
    pub events: Vec<EventRecord>,
    pub decode_config: DecodeConfig,
    pub seed: u64,
    pub label: String,
    pub incomplete: bool,
}

impl TrajectoryRecord {
    pub fn from_trajectory(traj: &DenoiseTrajectory, seed: u64, label: &str) -> Self {
        Self {
            prompt: traj.final_state.prompt.clone(),
            final_ids: traj.final_state.response.clone(),
            events: traj
                .events
                .iter()
                .map(|e| EventRecord {
                    step: e.step,
                    positions: e.positions.clone(),
                    probs: e.probs.iter().map(|&p| p as f32).collect(),
                })
                .collect(),
            decode_config: traj.decode_config.clone(),
            seed,
            label: label.to_string(),
            incomplete: traj.incomplete,
        }
    }

    /// Rebuild a checked trajectory (probabilities widen back to 64-bit).
    pub fn to_trajectory(&self) -> Result<DenoiseTrajectory> {
        let final_state =
            SequenceState::from_clean(self.prompt.clone(), self.final_ids.clone());
        let traj = DenoiseTrajectory {
            events: self
                .events
                .iter()
                .map(|e| UnmaskEvent {
                    step: e.step,
                    positions: e.positions.clone(),
                    probs: e.probs.iter().map(|&p| p as f64).collect(),
                })
                .collect(),
            final_state,
            decode_config: self.decode_config.clone(),
            incomplete: self.incomplete,
        };
        traj.check()?;
        Ok(traj)
    }
}

/// Append one value as a JSON line.
pub fn write_jsonl_line<S: Serialize>(w: &mut impl Write, value: &S) -> Result<()> {
    let line = serde_json::to_string(value)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    writeln!(w, "{line}")?;
    Ok(())
}

/// Read every line of a JSONL file; malformed lines are errors naming the
/// line number.
pub fn read_jsonl<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::InvalidArgument(format!("{}:{}: bad record: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}
