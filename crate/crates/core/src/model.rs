//! Bidirectional-attention masked denoiser with exact gradients.
//!
//! A small pre-norm transformer predicts every response token from the full
//! (prompt + partially masked response) context. Forward passes are recorded
//! on a [`Tape`], so any scalar built from the outputs can be differentiated
//! with respect to every parameter.

use std::collections::BTreeMap;

use crate::diffusion::SequenceState;
use crate::error::{Error, Result};
use crate::rng::{normal, Seeder, Stream};
use crate::scalar::{cast, to_f64, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: vocab::SIZE,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 128,
            max_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.vocab_size <= vocab::MASK {
            bad.push("model.vocab_size must exceed the MASK id".to_string());
        }
        for (name, v) in [
            ("model.embed_dim", self.embed_dim),
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
            ("model.ff_dim", self.ff_dim),
            ("model.max_len", self.max_len),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if self.n_heads > 0 && self.embed_dim % self.n_heads != 0 {
            bad.push("model.embed_dim must be divisible by model.n_heads".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Named parameter tensors. Names are unique by construction (map keyed by
/// name); values are expected to stay finite across updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        let prev = self.tensors.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (name, t) in &self.tensors {
            out.insert(name, Tensor::zeros(t.rows(), t.cols()));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn global_norm(&self) -> T {
        self.tensors.values().map(|t| t.frobenius_sq()).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors.values_mut() {
            t.scale_assign(s);
        }
    }

    /// `self += s · other` over matching names.
    pub fn add_scaled(&mut self, other: &Self, s: T) {
        for (name, t) in &mut self.tensors {
            let o = other.tensors.get(name).unwrap_or_else(|| panic!("missing {name}"));
            assert_eq!(t.shape(), o.shape());
            for (a, &b) in t.data_mut().iter_mut().zip(o.data().iter()) {
                *a += s * b;
            }
        }
    }
}

/// One categorical distribution per response position; rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDistributions<T> {
    probs: Tensor<T>,
}

impl<T: Real> PositionDistributions<T> {
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        let tol = cast::<T>(1e-6);
        for r in 0..probs.rows() {
            let mut sum = T::zero();
            for &p in probs.row(r) {
                if p < T::zero() || !p.is_finite() {
                    return Err(Error::Numeric(format!("bad probability in row {r}")));
                }
                sum += p;
            }
            if (sum - T::one()).abs() > tol {
                return Err(Error::Numeric(format!(
                    "row {r} sums to {} (want 1 ± 1e-6)",
                    to_f64(sum)
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn vocab(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.probs.row(i)
    }

    pub fn prob(&self, i: usize, token: usize) -> T {
        self.probs.get(i, token)
    }

    /// Shannon entropy of row `i` in nats.
    pub fn entropy(&self, i: usize) -> f64 {
        self.probs
            .row(i)
            .iter()
            .map(|&p| {
                let p = to_f64(p);
                if p > 0.0 {
                    -p * p.ln()
                } else {
                    0.0
                }
            })
            .sum()
    }
}

/// Anything that maps a partially masked state to per-position distributions.
pub trait Denoiser<T: Real> {
    fn distributions(&self, state: &SequenceState) -> Result<PositionDistributions<T>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    GumbelArgmax,
    Categorical,
}

impl SampleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gumbel_argmax" => Ok(Self::GumbelArgmax),
            "categorical" => Ok(Self::Categorical),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampling mode {other:?} (want gumbel_argmax|categorical)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplingConfig {
    pub mode: SampleMode,
    pub temperature: f64,
    pub top_p: f64,
}

impl SamplingConfig {
    /// temperature 0 ⇒ plain argmax, reported with its raw probability.
    pub fn argmax() -> Self {
        Self { mode: SampleMode::GumbelArgmax, temperature: 0.0, top_p: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            bad.push("sampling.temperature must be >= 0".to_string());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            bad.push("sampling.top_p must lie in (0, 1]".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { mode: SampleMode::Categorical, temperature: 1.0, top_p: 1.0 }
    }
}

/// Draw a token from one distribution row.
///
/// Returns the id and its probability under the post-temperature distribution
/// (before any sampling noise or top-p truncation). With temperature 0 the
/// argmax id is returned with its raw probability, since the zero-temperature
/// limit distribution is degenerate.
pub fn sample_token<T: Real>(
    row: &[T],
    cfg: &SamplingConfig,
    rng: &mut Stream,
) -> Result<(usize, f64)> {
    use rand::Rng;
    if row.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("non-finite probability row".into()));
    }
    if cfg.temperature == 0.0 {
        let mut best = 0;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        return Ok((best, to_f64(row[best])));
    }

    // Post-temperature distribution: q_i ∝ p_i^{1/temperature}.
    let inv_t = 1.0 / cfg.temperature;
    let logq: Vec<f64> = row
        .iter()
        .map(|&p| {
            let p = to_f64(p).max(f64::MIN_POSITIVE);
            p.ln() * inv_t
        })
        .collect();
    let mx = logq.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = logq.iter().map(|&l| (l - mx).exp()).collect();
    let z: f64 = q.iter().sum();
    for v in q.iter_mut() {
        *v /= z;
    }

    // Optional nucleus truncation over the post-temperature distribution.
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::with_capacity(q.len());
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += q[i];
        if mass >= cfg.top_p {
            break;
        }
    }

    let chosen = match cfg.mode {
        SampleMode::GumbelArgmax => {
            let mut best = kept[0];
            let mut best_score = f64::NEG_INFINITY;
            for &i in &kept {
                let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
                let g = -(-u.ln()).ln();
                let score = (q[i] / mass).ln() + g;
                if score > best_score {
                    best_score = score;
                    best = i;
                }
            }
            best
        }
        SampleMode::Categorical => {
            let u: f64 = rng.random::<f64>() * mass;
            let mut acc = 0.0;
            let mut pick = kept[kept.len() - 1];
            for &i in &kept {
                acc += q[i];
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    Ok((chosen, q[chosen]))
}

/// The denoiser: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

fn normal_tensor<T: Real>(rng: &mut Stream, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| cast::<T>(normal(rng) * std)).collect();
    Tensor::from_vec(rows, cols, data)
}

impl<T: Real> Model<T> {
    /// Fresh parameters: normal(0, 0.02) weights and embeddings, zero biases,
    /// unit layer-norm gains. Seeded from `cfg.seed`.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Seeder::new(cfg.seed).stream("model-init");
        let d = cfg.embed_dim;
        let mut p = ParamStore::new();
        p.insert("tok_emb", normal_tensor(&mut rng, cfg.vocab_size, d, INIT_STD));
        p.insert("pos_emb", normal_tensor(&mut rng, cfg.max_len, d, INIT_STD));
        for l in 0..cfg.n_layers {
            let pre = format!("layer{l}");
            p.insert(&format!("{pre}.ln1.g"), Tensor::full(1, d, T::one()));
            p.insert(&format!("{pre}.ln1.b"), Tensor::zeros(1, d));
            for nm in ["wq", "wk", "wv", "wo"] {
                p.insert(&format!("{pre}.attn.{nm}"), normal_tensor(&mut rng, d, d, INIT_STD));
            }
            for nm in ["bq", "bk", "bv", "bo"] {
                p.insert(&format!("{pre}.attn.{nm}"), Tensor::zeros(1, d));
            }
            p.insert(&format!("{pre}.ln2.g"), Tensor::full(1, d, T::one()));
            p.insert(&format!("{pre}.ln2.b"), Tensor::zeros(1, d));
            p.insert(&format!("{pre}.ff.w1"), normal_tensor(&mut rng, d, cfg.ff_dim, INIT_STD));
            p.insert(&format!("{pre}.ff.b1"), Tensor::zeros(1, cfg.ff_dim));
            p.insert(&format!("{pre}.ff.w2"), normal_tensor(&mut rng, cfg.ff_dim, d, INIT_STD));
            p.insert(&format!("{pre}.ff.b2"), Tensor::zeros(1, d));
        }
        p.insert("ln_f.g", Tensor::full(1, d, T::one()));
        p.insert("ln_f.b", Tensor::zeros(1, d));
        p.insert("head.w", normal_tensor(&mut rng, d, cfg.vocab_size, INIT_STD));
        p.insert("head.b", Tensor::zeros(1, cfg.vocab_size));
        Ok(Self { cfg, params: p })
    }

    /// Taped forward pass over `prompt ++ response`. The returned structure
    /// exposes parameter leaves for gradient extraction and the log-softmax
    /// output rows.
    pub fn forward_state(&self, state: &SequenceState) -> Result<TapedForward<T>> {
        let ids = state.full_ids();
        let s = ids.len();
        if s == 0 || s > self.cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {s} outside [1, {}]",
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocab")));
        }

        let mut tape = Tape::new();
        let mut pv: BTreeMap<String, Var> = BTreeMap::new();
        for (name, tensor) in self.params.iter() {
            pv.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        let v = |name: &str| -> Var { pv[name] };

        let eps = cast::<T>(LN_EPS);
        let tok = tape.gather_rows(v("tok_emb"), &ids);
        let pos_ids: Vec<usize> = (0..s).collect();
        let pos = tape.gather_rows(v("pos_emb"), &pos_ids);
        let mut h = tape.add(tok, pos);

        let heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let scale = cast::<T>(1.0 / (hd as f64).sqrt());

        for l in 0..self.cfg.n_layers {
            let pre = format!("layer{l}");
            let n1 = tape.layer_norm_rows(h, eps);
            let n1 = tape.mul_row(n1, v(&format!("{pre}.ln1.g")));
            let n1 = tape.add_row(n1, v(&format!("{pre}.ln1.b")));

            let q = tape.matmul(n1, v(&format!("{pre}.attn.wq")));
            let q = tape.add_row(q, v(&format!("{pre}.attn.bq")));
            let k = tape.matmul(n1, v(&format!("{pre}.attn.wk")));
            let k = tape.add_row(k, v(&format!("{pre}.attn.bk")));
            let val = tape.matmul(n1, v(&format!("{pre}.attn.wv")));
            let val = tape.add_row(val, v(&format!("{pre}.attn.bv")));

            let mut outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let lo = hh * hd;
                let hi = lo + hd;
                let qh = tape.slice_cols(q, lo, hi);
                let kh = tape.slice_cols(k, lo, hi);
                let vh = tape.slice_cols(val, lo, hi);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let att = tape.softmax_rows(scores);
                outs.push(tape.matmul(att, vh));
            }
            let cat = tape.concat_cols(&outs);
            let proj = tape.matmul(cat, v(&format!("{pre}.attn.wo")));
            let proj = tape.add_row(proj, v(&format!("{pre}.attn.bo")));
            h = tape.add(h, proj);

            let n2 = tape.layer_norm_rows(h, eps);
            let n2 = tape.mul_row(n2, v(&format!("{pre}.ln2.g")));
            let n2 = tape.add_row(n2, v(&format!("{pre}.ln2.b")));
            let f1 = tape.matmul(n2, v(&format!("{pre}.ff.w1")));
            let f1 = tape.add_row(f1, v(&format!("{pre}.ff.b1")));
            let f1 = tape.gelu(f1);
            let f2 = tape.matmul(f1, v(&format!("{pre}.ff.w2")));
            let f2 = tape.add_row(f2, v(&format!("{pre}.ff.b2")));
            h = tape.add(h, f2);
        }

        let hf = tape.layer_norm_rows(h, eps);
        let hf = tape.mul_row(hf, v("ln_f.g"));
        let hf = tape.add_row(hf, v("ln_f.b"));
        let logits = tape.matmul(hf, v("head.w"));
        let logits = tape.add_row(logits, v("head.b"));
        let log_probs = tape.log_softmax_rows(logits);

        Ok(TapedForward { tape, param_vars: pv, log_probs, prompt_len: state.prompt.len() })
    }

    /// Negative mean masked-token log-likelihood scaled by 1/t_ratio.
    ///
    /// Masks `x0` with `forward_mask`; a draw that masks nothing is resampled
    /// once and skipped (flagged) if still empty.
    pub fn mlm_loss(&self, x0: &SequenceState, t_ratio: f64, rng: &mut Stream) -> Result<MlmOutcome<T>> {
        if !(t_ratio > 0.0 && t_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!("t_ratio {t_ratio} outside (0, 1]")));
        }
        let mut xt = crate::diffusion::forward_mask(x0, t_ratio, rng)?;
        if xt.masked_count() == 0 {
            xt = crate::diffusion::forward_mask(x0, t_ratio, rng)?;
        }
        if xt.masked_count() == 0 {
            return Ok(MlmOutcome::Skipped);
        }
        let masked = xt.masked_positions();
        let targets: Vec<(usize, usize)> =
            masked.iter().map(|&i| (i, x0.response[i])).collect();
        let mut fwd = self.forward_state(&xt)?;
        let lp = fwd.gather_response_log_probs(&targets);
        let mean = fwd.tape.mean_all(lp);
        let neg = fwd.tape.neg(mean);
        let root = fwd.tape.scale(neg, cast::<T>(1.0 / t_ratio));
        Ok(MlmOutcome::Loss(MlmLoss { fwd, root, masked_count: masked.len() }))
    }
}

impl<T: Real> Denoiser<T> for Model<T> {
    /// Full-context forward pass; one distribution per response position.
    fn distributions(&self, state: &SequenceState) -> Result<PositionDistributions<T>> {
        let fwd = self.forward_state(state)?;
        let lp = fwd.tape.value(fwd.log_probs);
        let l = state.len();
        let v = self.cfg.vocab_size;
        let mut probs = Tensor::zeros(l, v);
        for i in 0..l {
            let src = lp.row(fwd.prompt_len + i);
            let dst = probs.row_mut(i);
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = s.exp();
            }
        }
        PositionDistributions::new(probs)
    }
}

/// A recorded forward pass: the tape, parameter leaf handles, and the
/// log-probability output (rows cover prompt + response).
pub struct TapedForward<T> {
    pub tape: Tape<T>,
    pub param_vars: BTreeMap<String, Var>,
    pub log_probs: Var,
    pub prompt_len: usize,
}

impl<T: Real> TapedForward<T> {
    /// Gather log p(token) at `(response position, token)` pairs into an
    /// (n × 1) tape node.
    pub fn gather_response_log_probs(&mut self, items: &[(usize, usize)]) -> Var {
        let coords: Vec<(usize, usize)> =
            items.iter().map(|&(pos, tok)| (self.prompt_len + pos, tok)).collect();
        self.tape.gather_entries(self.log_probs, &coords)
    }

    /// Plain value of log p(token) at one response position.
    pub fn response_log_prob(&self, pos: usize, token: usize) -> T {
        self.tape.value(self.log_probs).get(self.prompt_len + pos, token)
    }

    /// Gradients of a scalar root with respect to every parameter.
    pub fn gradients(&self, root: Var) -> ParamStore<T> {
        let g = self.tape.backward(root);
        let mut out = ParamStore::new();
        for (name, &var) in &self.param_vars {
            let t = self.tape.value(var);
            let grad = g
                .wrt(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            out.insert(name, grad);
        }
        out
    }

    /// `into += scale · ∇root` for every parameter.
    pub fn accumulate_gradients(&self, root: Var, scale: T, into: &mut ParamStore<T>) {
        let g = self.tape.backward(root);
        for (name, &var) in &self.param_vars {
            if let Some(grad) = g.wrt(var) {
                let dst = into.get_mut(name);
                for (d, &s) in dst.data_mut().iter_mut().zip(grad.data().iter()) {
                    *d += scale * s;
                }
            }
        }
    }
}

pub enum MlmOutcome<T> {
    /// No position got masked even after one resample.
    Skipped,
    Loss(MlmLoss<T>),
}

pub struct MlmLoss<T> {
    pub fwd: TapedForward<T>,
    pub root: Var,
    pub masked_count: usize,
}

impl<T: Real> MlmLoss<T> {
    pub fn value(&self) -> f64 {
        to_f64(self.fwd.tape.value(self.root).item())
    }
}
