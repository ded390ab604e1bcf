//! Run configuration files and experiment manifests.
//!
//! A run file is TOML with seven optional sections (`run`, `model`, `task`,
//! `pretrain`, `rl`, `decode`, `sampling`). Every key has a default; unknown
//! sections and keys are errors. Parsing collects *all* problems — structural
//! and semantic — into one [`Error::Config`] so a bad file is fixed in one
//! round trip.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::diffusion::{DecodeConfig, UnmaskStrategy};
use crate::error::{Error, Result};
use crate::loss::{BaselineTarget, EstimatorKind, Normalization};
use crate::model::{ModelConfig, SampleMode, SamplingConfig};
use crate::tasks::{TaskFamily, TaskShape};
use crate::trainer::{PretrainConfig, TrainConfig};
use crate::vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub out_dir: String,
    pub seed: u64,
    pub label: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { out_dir: "runs/default".into(), seed: 17, label: "run".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            vocab_size: m.vocab_size,
            embed_dim: m.embed_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ff_dim: m.ff_dim,
            max_len: m.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSection {
    pub families: Vec<TaskFamily>,
    pub response_len: usize,
    pub word_len: usize,
    /// Held-out instances per evaluation cell.
    pub eval_count: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let s = TaskShape::default();
        Self {
            families: vec![TaskFamily::Addition],
            response_len: s.response_len,
            word_len: s.word_len,
            eval_count: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self { steps: p.steps, batch_size: p.batch_size, lr: p.lr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlSection {
    pub estimator: EstimatorKind,
    pub target: BaselineTarget,
    pub normalization: Normalization,
    pub group_size: usize,
    pub rollout_batch: usize,
    pub k_steps: usize,
    pub inner_iters: usize,
    pub tau_sample: f64,
    pub epsilon: f64,
    pub clip_threshold: f64,
    pub beta: f64,
    pub std_floor: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub total_steps: usize,
    pub mask_rate: f64,
    /// 0 ⇒ only the final checkpoint is written.
    pub checkpoint_every: usize,
}

impl Default for RlSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            estimator: t.estimator,
            target: t.target,
            normalization: t.normalization,
            group_size: t.group_size,
            rollout_batch: t.rollout_batch,
            k_steps: t.k_steps,
            inner_iters: t.inner_iters,
            tau_sample: t.tau_sample,
            epsilon: t.epsilon,
            clip_threshold: t.clip_threshold,
            beta: t.beta,
            std_floor: t.std_floor,
            lr: t.lr,
            max_grad_norm: t.max_grad_norm,
            total_steps: t.total_steps,
            mask_rate: t.mask_rate,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSection {
    pub strategy: UnmaskStrategy,
    pub k_per_step: usize,
    pub threshold: f64,
    pub block_size: usize,
    pub max_steps: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeConfig::default();
        Self {
            strategy: d.strategy,
            k_per_step: d.k_per_step,
            threshold: d.threshold,
            block_size: d.block_size,
            max_steps: d.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSection {
    pub mode: SampleMode,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let s = SamplingConfig::default();
        Self { mode: s.mode, temperature: s.temperature, top_p: s.top_p }
    }
}

/// One experiment, fully specified. Field names are the file keys.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub task: TaskSection,
    pub pretrain: PretrainSection,
    pub rl: RlSection,
    pub decode: DecodeSection,
    pub sampling: SamplingSection,
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn set_usize(path: &str, val: &Value, slot: &mut usize, bad: &mut Vec<String>) {
    match val.as_integer() {
        Some(n) if n >= 0 => *slot = n as usize,
        Some(n) => bad.push(format!("{path}: must be ≥ 0 (got {n})")),
        None => bad.push(format!("{path}: expected an integer (got {})", kind_name(val))),
    }
}

fn set_u64(path: &str, val: &Value, slot: &mut u64, bad: &mut Vec<String>) {
    match val.as_integer() {
        Some(n) if n >= 0 => *slot = n as u64,
        Some(n) => bad.push(format!("{path}: must be ≥ 0 (got {n})")),
        None => bad.push(format!("{path}: expected an integer (got {})", kind_name(val))),
    }
}

fn set_f64(path: &str, val: &Value, slot: &mut f64, bad: &mut Vec<String>) {
    match val {
        Value::Float(x) => *slot = *x,
        Value::Integer(n) => *slot = *n as f64,
        other => bad.push(format!("{path}: expected a number (got {})", kind_name(other))),
    }
}

fn set_string(path: &str, val: &Value, slot: &mut String, bad: &mut Vec<String>) {
    match val.as_str() {
        Some(s) => *slot = s.to_string(),
        None => bad.push(format!("{path}: expected a string (got {})", kind_name(val))),
    }
}

fn set_parsed<T>(
    path: &str,
    val: &Value,
    parse: impl Fn(&str) -> Result<T>,
    slot: &mut T,
    bad: &mut Vec<String>,
) {
    match val.as_str() {
        Some(s) => match parse(s) {
            Ok(x) => *slot = x,
            Err(e) => bad.push(format!("{path}: {e}")),
        },
        None => bad.push(format!("{path}: expected a string (got {})", kind_name(val))),
    }
}

fn walk_run(out: &mut RunSection, t: &Table, bad: &mut Vec<String>) {
    for (k, v) in t {
        match k.as_str() {
            "out_dir" => set_string("run.out_dir", v, &mut out.out_dir, bad),
            "seed" => set_u64("run.seed", v, &mut out.seed, bad),
            "label" => set_string("run.label", v, &mut out.label, bad),
            other => bad.push(format!("run.{other}: unknown key")),
        }
    }
}

fn walk_model(out: &mut ModelSection, t: &Table, bad: &mut Vec<String>) {
    for (k, v) in t {
        match k.as_str() {
            "vocab_size" => set_usize("model.vocab_size", v, &mut out.vocab_size, bad),
            "embed_dim" => set_usize("model.embed_dim", v, &mut out.embed_dim, bad),
            "n_layers" => set_usize("model.n_layers", v, &mut out.n_layers, bad),
            "n_heads" => set_usize("model.n_heads", v, &mut out.n_heads, bad),
            "ff_dim" => set_usize("model.ff_dim", v, &mut out.ff_dim, bad),
            "max_len" => set_usize("model.max_len", v, &mut out.max_len, bad),
            other => bad.push(format!("model.{other}: unknown key")),
        }
    }
}

fn walk_task(out: &mut TaskSection, t: &Table, bad: &mut Vec<String>) {
    for (k, v) in t {
        match k.as_str() {
            "families" => match v.as_array() {
                Some(items) => {
                    let mut fams = Vec::new();
                    for (i, item) in items.iter().enumerate() {
                        match item.as_str() {
                            Some(s) => match TaskFamily::parse(s) {
                                Ok(f) => fams.push(f),
                                Err(e) => bad.push(format!("task.families[{i}]: {e}")),
                            },
                            None => bad.push(format!(
                                "task.families[{i}]: expected a string (got {})",
                                kind_name(item)
                            )),
                        }
                    }
                    out.families = fams;
                }
                None => bad.push(format!(
                    "task.families: expected an array of strings (got {})",
                    kind_name(v)
                )),
            },
            "response_len" => set_usize("task.response_len", v, &mut out.response_len, bad),
            "word_len" => set_usize("task.word_len", v, &mut out.word_len, bad),
            "eval_count" => set_usize("task.eval_count", v, &mut out.eval_count, bad),
            other => bad.push(format!("task.{other}: unknown key")),
        }
    }
}

fn walk_pretrain(out: &mut PretrainSection, t: &Table, bad: &mut Vec<String>) {
    for (k, v) in t {
        match k.as_str() {
            "steps" => set_usize("pretrain.steps", v, &mut out.steps, bad),
            "batch_size" => set_usize("pretrain.batch_size", v, &mut out.batch_size, bad),
            "lr" => set_f64("pretrain.lr", v, &mut out.lr, bad),
            other => bad.push(format!("pretrain.{other}: unknown key")),
        }
    }
}

fn walk_rl(out: &mut RlSection, t: &Table, bad: &mut Vec<String>) {
    for (k, v) in t {
        match k.as_str() {
            "estimator" => {
                set_parsed("rl.estimator", v, EstimatorKind::parse, &mut out.estimator, bad)
            }
            "target" => set_parsed("rl.target", v, BaselineTarget::parse, &mut out.target, bad),
            "normalization" => set_parsed(
                "rl.normalization",
                v,
                Normalization::parse,
                &mut out.normalization,
                bad,
            ),
            "group_size" => set_usize("rl.group_size", v, &mut out.group_size, bad),
            "rollout_batch" => set_usize("rl.rollout_batch", v, &mut out.rollout_batch, bad),
            "k_steps" => set_usize("rl.k_steps", v, &mut out.k_steps, bad),
            "inner_iters" => set_usize("rl.inner_iters", v, &mut out.inner_iters, bad),
            "tau_sample" => set_f64("rl.tau_sample", v, &mut out.tau_sample, bad),
            "epsilon" => set_f64("rl.epsilon", v, &mut out.epsilon, bad),
            "clip_threshold" => set_f64("rl.clip_threshold", v, &mut out.clip_threshold, bad),
            "beta" => set_f64("rl.beta", v, &mut out.beta, bad),
            "std_floor" => set_f64("rl.std_floor", v, &mut out.std_floor, bad),
            "lr" => set_f64("rl.lr", v, &mut out.lr, bad),
            "max_grad_norm" => set_f64("rl.max_grad_norm", v, &mut out.max_grad_norm, bad),
            "total_steps" => set_usize("rl.total_steps", v, &mut out.total_steps, bad),
            "mask_rate" => set_f64("rl.mask_rate", v, &mut out.mask_rate, bad),
            "checkpoint_every" => {
                set_usize("rl.checkpoint_every", v, &mut out.checkpoint_every, bad)
            }
            other => bad.push(format!("rl.{other}: unknown key")),
        }
    }
}

fn walk_decode(out: &mut DecodeSection, t: &Table, bad: &mut Vec<String>) {
    for (k, v) in t {
        match k.as_str() {
            "strategy" => {
                set_parsed("decode.strategy", v, UnmaskStrategy::parse, &mut out.strategy, bad)
            }
            "k_per_step" => set_usize("decode.k_per_step", v, &mut out.k_per_step, bad),
            "threshold" => set_f64("decode.threshold", v, &mut out.threshold, bad),
            "block_size" => set_usize("decode.block_size", v, &mut out.block_size, bad),
            "max_steps" => set_usize("decode.max_steps", v, &mut out.max_steps, bad),
            other => bad.push(format!("decode.{other}: unknown key")),
        }
    }
}

fn walk_sampling(out: &mut SamplingSection, t: &Table, bad: &mut Vec<String>) {
    for (k, v) in t {
        match k.as_str() {
            "mode" => set_parsed("sampling.mode", v, SampleMode::parse, &mut out.mode, bad),
            "temperature" => set_f64("sampling.temperature", v, &mut out.temperature, bad),
            "top_p" => set_f64("sampling.top_p", v, &mut out.top_p, bad),
            other => bad.push(format!("sampling.{other}: unknown key")),
        }
    }
}

/// Parse and validate a run file. Structural problems (unknown keys, type
/// mismatches) and semantic violations (out-of-range values) are reported
/// together, each naming the offending `section.key`.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let table: Table = text
        .parse()
        .map_err(|e| Error::Config(vec![format!("toml syntax error: {e}")]))?;
    let mut cfg = RunConfig::default();
    let mut bad = Vec::new();
    for (name, value) in &table {
        let section = match value.as_table() {
            Some(t) => t,
            None => {
                bad.push(format!("{name}: expected a section, not a value"));
                continue;
            }
        };
        match name.as_str() {
            "run" => walk_run(&mut cfg.run, section, &mut bad),
            "model" => walk_model(&mut cfg.model, section, &mut bad),
            "task" => walk_task(&mut cfg.task, section, &mut bad),
            "pretrain" => walk_pretrain(&mut cfg.pretrain, section, &mut bad),
            "rl" => walk_rl(&mut cfg.rl, section, &mut bad),
            "decode" => walk_decode(&mut cfg.decode, section, &mut bad),
            "sampling" => walk_sampling(&mut cfg.sampling, section, &mut bad),
            other => bad.push(format!("unknown section: {other}")),
        }
    }
    bad.extend(cfg.violations());
    if bad.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(bad))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.model.vocab_size,
            embed_dim: self.model.embed_dim,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            ff_dim: self.model.ff_dim,
            max_len: self.model.max_len,
            seed: self.run.seed,
        }
    }

    pub fn task_shape(&self) -> TaskShape {
        TaskShape { response_len: self.task.response_len, word_len: self.task.word_len }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            strategy: self.decode.strategy,
            k_per_step: self.decode.k_per_step,
            threshold: self.decode.threshold,
            block_size: self.decode.block_size,
            max_steps: self.decode.max_steps,
        }
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig {
            mode: self.sampling.mode,
            temperature: self.sampling.temperature,
            top_p: self.sampling.top_p,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            group_size: self.rl.group_size,
            rollout_batch: self.rl.rollout_batch,
            k_steps: self.rl.k_steps,
            inner_iters: self.rl.inner_iters,
            tau_sample: self.rl.tau_sample,
            epsilon: self.rl.epsilon,
            clip_threshold: self.rl.clip_threshold,
            beta: self.rl.beta,
            std_floor: self.rl.std_floor,
            lr: self.rl.lr,
            max_grad_norm: self.rl.max_grad_norm,
            total_steps: self.rl.total_steps,
            estimator: self.rl.estimator,
            target: self.rl.target,
            normalization: self.rl.normalization,
            mask_rate: self.rl.mask_rate,
            decode: self.decode_config(),
            sampling: self.sampling_config(),
            checkpoint_every: self.rl.checkpoint_every,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            families: self.task.families.clone(),
            shape: self.task_shape(),
        }
    }

    /// Every semantic problem, each message starting with `section.key`.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.run.label.trim().is_empty() {
            bad.push("run.label: must be nonempty".into());
        }
        if self.run.out_dir.trim().is_empty() {
            bad.push("run.out_dir: must be nonempty".into());
        }
        if let Err(Error::Config(v)) = self.model_config().validate() {
            bad.extend(v);
        }
        if self.model.vocab_size < vocab::SIZE {
            bad.push(format!(
                "model.vocab_size: must be ≥ {} to cover the task vocabulary (got {})",
                vocab::SIZE,
                self.model.vocab_size
            ));
        }
        if self.task.families.is_empty() {
            bad.push("task.families: must name at least one task family".into());
        }
        if self.task.response_len == 0 {
            bad.push("task.response_len: must be ≥ 1".into());
        }
        if self.task.word_len == 0 {
            bad.push("task.word_len: must be ≥ 1".into());
        }
        if self.task.eval_count == 0 {
            bad.push("task.eval_count: must be ≥ 1".into());
        }
        if self.pretrain.batch_size == 0 {
            bad.push("pretrain.batch_size: must be ≥ 1".into());
        }
        if !(self.pretrain.lr > 0.0) {
            bad.push(format!("pretrain.lr: must be > 0 (got {})", self.pretrain.lr));
        }
        // Validate the RL block against defaults for decode/sampling so their
        // problems are reported once, under their own section names below.
        let rl_probe =
            TrainConfig { decode: DecodeConfig::default(), ..self.train_config() };
        let rl_probe = TrainConfig { sampling: SamplingConfig::default(), ..rl_probe };
        bad.extend(rl_probe.violations().into_iter().map(|m| format!("rl.{m}")));
        if let Err(Error::Config(v)) = self.decode_config().validate() {
            bad.extend(v);
        }
        if let Err(Error::Config(v)) = self.sampling_config().validate() {
            bad.extend(v);
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.violations();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes to toml")
    }
}

/// Snapshot written to `manifest.json` before any training step runs; never
/// rewritten afterwards. Completion is recorded separately in `done.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub config: RunConfig,
    /// Artifact name → path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: RunConfig, artifacts: BTreeMap<String, String>) -> Self {
        Self {
            label: config.run.label.clone(),
            seed: config.run.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: unix_now(),
            config,
            artifacts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneMarker {
    pub finished_unix: u64,
    pub final_checkpoint: String,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Write pretty JSON via a temp file in the same directory plus an atomic
/// rename, so readers never observe a partial file.
pub fn write_json_atomic<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("{}: bad json: {e}", path.display())))
}
