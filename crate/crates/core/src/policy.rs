//! Differentiable policy contract and the tabular toy policy.
//!
//! Parameters live outside the policy as a flat `f64` slice so the optimizer,
//! checkpoints and finite-difference checks can all work on the same vector.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(usize),
    #[error("position {position} outside a completion of length {len}")]
    BadPosition { position: usize, len: usize },
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
}

/// Log-probability of one token and its sparse gradient w.r.t. the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProb {
    pub logp: f64,
    pub grad: Vec<(usize, f64)>,
}

/// A sampled completion with the log-probabilities of the distribution it was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
}

pub trait Policy: Send + Sync {
    fn num_params(&self) -> usize;

    fn vocab(&self) -> &[String];

    /// `log π(completion[position] | prompt, completion[..position])` and its gradient.
    fn log_prob(
        &self,
        params: &[f64],
        prompt: &str,
        completion: &[usize],
        position: usize,
    ) -> Result<TokenLogProb, PolicyError>;

    /// Next-token distribution after `prefix`.
    fn distribution(&self, params: &[f64], prompt: &str, prefix: &[usize]) -> Result<Vec<f64>, PolicyError>;

    fn sample(
        &self,
        params: &[f64],
        prompt: &str,
        temperature: f64,
        seed: u64,
    ) -> Result<Completion, PolicyError>;

    /// Text → token ids, terminated by the end-of-sequence token.
    fn encode(&self, text: &str) -> Result<Vec<usize>, PolicyError>;

    fn decode(&self, tokens: &[usize]) -> String;
}

pub const EOS: &str = "<eos>";

/// Softmax table indexed by a (hashed prompt, position) context bucket.
///
/// The prompt hashes into one of `prompt_buckets` slots; each slot owns one
/// row of logits per position up to `max_len`.
///
/// Text is tokenized line by line: a line beginning with `###` or `<` is a
/// single symbol, any other line splits on whitespace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    eos: usize,
    prompt_buckets: usize,
    max_len: usize,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn is_line_symbol(s: &str) -> bool {
    s.starts_with("###") || s.starts_with('<')
}

pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if is_line_symbol(t) {
            out.push(t.to_string());
        } else {
            out.extend(t.split_whitespace().map(str::to_string));
        }
    }
    out
}

impl ToyPolicy {
    /// `symbols` need not contain the end-of-sequence marker; it is appended.
    pub fn new(symbols: impl IntoIterator<Item = String>, prompt_buckets: usize, max_len: usize) -> Self {
        let mut vocab: Vec<String> = Vec::new();
        for s in symbols {
            if s != EOS && !vocab.contains(&s) {
                vocab.push(s);
            }
        }
        vocab.push(EOS.to_string());
        let eos = vocab.len() - 1;
        let mut p = Self {
            vocab,
            index: HashMap::new(),
            eos,
            prompt_buckets: prompt_buckets.max(1),
            max_len: max_len.max(1),
        };
        p.rebuild_index();
        p
    }

    /// Vocabulary covering every symbol of the given texts.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>, prompt_buckets: usize, max_len: usize) -> Self {
        let symbols = texts.into_iter().flat_map(tokenize_text);
        Self::new(symbols, prompt_buckets, max_len)
    }

    fn rebuild_index(&mut self) {
        self.index = self.vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn contexts(&self) -> usize {
        self.prompt_buckets * self.max_len
    }

    pub fn init_params(&self) -> Vec<f64> {
        vec![0.0; self.num_params()]
    }

    /// Row of the logit table used at `position` for `prompt`.
    pub fn context_bucket(&self, prompt: &str, position: usize) -> usize {
        self.prompt_slot(prompt) * self.max_len + position.min(self.max_len - 1)
    }

    pub fn prompt_slot(&self, prompt: &str) -> usize {
        (fnv1a(prompt.bytes(), 0xcbf2_9ce4_8422_2325) % self.prompt_buckets as u64) as usize
    }

    fn check_params(&self, params: &[f64]) -> Result<(), PolicyError> {
        if params.len() != self.num_params() {
            return Err(PolicyError::ParamCount { expected: self.num_params(), got: params.len() });
        }
        Ok(())
    }

    fn softmax_row(&self, params: &[f64], bucket: usize, temperature: f64) -> Vec<f64> {
        let v = self.vocab.len();
        let row = &params[bucket * v..(bucket + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| ((x - max) / temperature).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    fn log_softmax_at(&self, params: &[f64], bucket: usize, token: usize, temperature: f64) -> f64 {
        let v = self.vocab.len();
        let row = &params[bucket * v..(bucket + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| ((x - max) / temperature).exp()).sum::<f64>().ln();
        (row[token] - max) / temperature - lse
    }
}

impl Policy for ToyPolicy {
    fn num_params(&self) -> usize {
        self.contexts() * self.vocab.len()
    }

    fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn log_prob(
        &self,
        params: &[f64],
        prompt: &str,
        completion: &[usize],
        position: usize,
    ) -> Result<TokenLogProb, PolicyError> {
        self.check_params(params)?;
        let token = *completion
            .get(position)
            .ok_or(PolicyError::BadPosition { position, len: completion.len() })?;
        if token >= self.vocab.len() {
            return Err(PolicyError::UnknownToken(token));
        }
        let bucket = self.context_bucket(prompt, position);
        let probs = self.softmax_row(params, bucket, 1.0);
        let logp = self.log_softmax_at(params, bucket, token, 1.0);
        let base = bucket * self.vocab.len();
        let grad = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| (base + k, if k == token { 1.0 - p } else { -p }))
            .collect();
        Ok(TokenLogProb { logp, grad })
    }

    fn distribution(&self, params: &[f64], prompt: &str, prefix: &[usize]) -> Result<Vec<f64>, PolicyError> {
        self.check_params(params)?;
        Ok(self.softmax_row(params, self.context_bucket(prompt, prefix.len()), 1.0))
    }

    fn sample(
        &self,
        params: &[f64],
        prompt: &str,
        temperature: f64,
        seed: u64,
    ) -> Result<Completion, PolicyError> {
        self.check_params(params)?;
        if !(temperature > 0.0) {
            return Err(PolicyError::BadTemperature(temperature));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        for pos in 0..self.max_len {
            let bucket = self.context_bucket(prompt, pos);
            let probs = self.softmax_row(params, bucket, temperature);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut choice = probs.len() - 1;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    choice = k;
                    break;
                }
            }
            tokens.push(choice);
            logprobs.push(self.log_softmax_at(params, bucket, choice, temperature));
            if choice == self.eos {
                break;
            }
        }
        Ok(Completion { tokens, logprobs })
    }

    fn encode(&self, text: &str) -> Result<Vec<usize>, PolicyError> {
        let mut ids = tokenize_text(text)
            .into_iter()
            .map(|s| self.index.get(&s).copied().ok_or(PolicyError::UnknownSymbol(s)))
            .collect::<Result<Vec<_>, _>>()?;
        ids.push(self.eos);
        Ok(ids)
    }

    fn decode(&self, tokens: &[usize]) -> String {
        let mut lines: Vec<String> = Vec::new();
        let mut current = String::new();
        for &t in tokens {
            if t == self.eos {
                break;
            }
            let Some(sym) = self.vocab.get(t) else { continue };
            if is_line_symbol(sym) {
                if !current.is_empty() {
                    lines.push(std::mem::take(&mut current));
                }
                lines.push(sym.clone());
            } else {
                if !current.is_empty() {
                    current.push(' ');
                }
                current.push_str(sym);
            }
        }
        if !current.is_empty() {
            lines.push(current);
        }
        lines.join("\n")
    }
}

/// Restores the symbol index after deserialization.
impl ToyPolicy {
    pub fn reindexed(mut self) -> Self {
        self.rebuild_index();
        self
    }
}
