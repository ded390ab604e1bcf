//! Synthetic verifiable tasks: 2-digit addition, string reversal, sorting.
//!
//! Addition and reversal use a binary reward on the answer extracted before
//! the SEP delimiter (numeric answers are canonicalized, so leading zeros are
//! accepted). Sorting is scored by the fraction of output positions matching
//! the sorted input, giving a dense reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::vocab::{self, digit_token, letter_token, token_digit, EQ, PAD, PLUS, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Addition,
    Reverse,
    Sort,
}

impl TaskFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(Self::Addition),
            "reverse" => Ok(Self::Reverse),
            "sort" => Ok(Self::Sort),
            other => Err(Error::InvalidArgument(format!(
                "unknown task family {other:?} (want addition|reverse|sort)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Addition => "addition",
            Self::Reverse => "reverse",
            Self::Sort => "sort",
        }
    }
}

/// How a response is scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verifier {
    /// 1 iff the extracted answer equals `target`; `numeric` answers are
    /// canonicalized (leading zeros stripped) before comparison.
    Binary { target: Vec<usize>, numeric: bool },
    /// Fraction of `(position, expected token)` checks satisfied.
    PassRate { checks: Vec<(usize, usize)> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub family: TaskFamily,
    pub prompt: Vec<usize>,
    pub response_len: usize,
    pub verifier: Verifier,
    /// Gold response (answer + SEP + PAD fill), used for pretraining.
    pub gold: Vec<usize>,
}

/// Tokens before the first SEP. `None` when SEP is absent.
fn extract_answer(response: &[usize]) -> Option<&[usize]> {
    response.iter().position(|&t| t == SEP).map(|i| &response[..i])
}

/// Strip leading zeros from a digit-token answer; non-digit tokens make the
/// answer unparseable. "046" canonicalizes to "46", "000" to "0".
fn canonicalize_digits(tokens: &[usize]) -> Option<Vec<usize>> {
    if tokens.is_empty() {
        return None;
    }
    let mut digits = Vec::with_capacity(tokens.len());
    for &t in tokens {
        token_digit(t)?;
        digits.push(t);
    }
    match digits.iter().position(|&t| t != digit_token(0)) {
        Some(i) => Some(digits[i..].to_vec()),
        None => Some(vec![digit_token(0)]),
    }
}

/// Binary reward: 1 iff the canonicalized extracted answer equals the target.
pub fn reward_binary(response: &[usize], target: &[usize], numeric: bool) -> f64 {
    let Some(answer) = extract_answer(response) else {
        return 0.0;
    };
    let matches = if numeric {
        canonicalize_digits(answer).is_some_and(|a| a == target)
    } else {
        answer == target
    };
    if matches {
        1.0
    } else {
        0.0
    }
}

/// Pass-rate reward: fraction of position checks satisfied.
pub fn reward_passrate(response: &[usize], checks: &[(usize, usize)]) -> f64 {
    assert!(!checks.is_empty(), "pass-rate verifier needs at least one check");
    let passed = checks
        .iter()
        .filter(|&&(pos, want)| response.get(pos) == Some(&want))
        .count();
    passed as f64 / checks.len() as f64
}

impl TaskInstance {
    pub fn reward(&self, response: &[usize]) -> f64 {
        match &self.verifier {
            Verifier::Binary { target, numeric } => reward_binary(response, target, *numeric),
            Verifier::PassRate { checks } => reward_passrate(response, checks),
        }
    }

    /// Clean gold state for pretraining.
    pub fn gold_state(&self) -> crate::diffusion::SequenceState {
        crate::diffusion::SequenceState::from_clean(self.prompt.clone(), self.gold.clone())
    }
}

fn pad_to(mut tokens: Vec<usize>, len: usize) -> Vec<usize> {
    assert!(tokens.len() <= len, "gold response longer than response_len");
    tokens.resize(len, PAD);
    tokens
}

/// `a + b =` with 2-digit operands; answer digits then SEP then PAD fill.
pub fn gen_addition(rng: &mut Stream, response_len: usize) -> TaskInstance {
    let a = 10 + rng.random_range(0..90u64);
    let b = 10 + rng.random_range(0..90u64);
    let mut prompt = vocab::encode_number(a);
    prompt.push(PLUS);
    prompt.extend(vocab::encode_number(b));
    prompt.push(EQ);
    let target = vocab::encode_number(a + b);
    let mut gold = target.clone();
    gold.push(SEP);
    TaskInstance {
        family: TaskFamily::Addition,
        prompt,
        response_len,
        verifier: Verifier::Binary { target, numeric: true },
        gold: pad_to(gold, response_len),
    }
}

/// Letters then `=`; the answer is the letters reversed, then SEP + PAD.
pub fn gen_reverse(rng: &mut Stream, word_len: usize, response_len: usize) -> TaskInstance {
    let letters: Vec<usize> =
        (0..word_len).map(|_| letter_token(rng.random_range(0..vocab::N_LETTERS))).collect();
    let mut prompt = letters.clone();
    prompt.push(EQ);
    let target: Vec<usize> = letters.iter().rev().copied().collect();
    let mut gold = target.clone();
    gold.push(SEP);
    TaskInstance {
        family: TaskFamily::Reverse,
        prompt,
        response_len,
        verifier: Verifier::Binary { target, numeric: false },
        gold: pad_to(gold, response_len),
    }
}

/// Eight letters then `=`; the answer is the same letters sorted, scored per
/// position.
pub fn gen_sort(rng: &mut Stream) -> TaskInstance {
    let n = 8;
    let letters: Vec<usize> =
        (0..n).map(|_| letter_token(rng.random_range(0..vocab::N_LETTERS))).collect();
    let mut prompt = letters.clone();
    prompt.push(EQ);
    let mut sorted = letters;
    sorted.sort_unstable();
    let checks: Vec<(usize, usize)> = sorted.iter().copied().enumerate().collect();
    TaskInstance {
        family: TaskFamily::Sort,
        prompt,
        response_len: n,
        verifier: Verifier::PassRate { checks },
        gold: sorted,
    }
}

/// Geometry of one task family: prompt/response lengths used for model
/// sizing and dataset manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskShape {
    pub response_len: usize,
    pub word_len: usize,
}

impl Default for TaskShape {
    fn default() -> Self {
        Self { response_len: 6, word_len: 4 }
    }
}

pub fn generate(family: TaskFamily, shape: &TaskShape, count: usize, rng: &mut Stream) -> Vec<TaskInstance> {
    (0..count)
        .map(|_| match family {
            TaskFamily::Addition => gen_addition(rng, shape.response_len),
            TaskFamily::Reverse => gen_reverse(rng, shape.word_len, shape.response_len),
            TaskFamily::Sort => gen_sort(rng),
        })
        .collect()
}
