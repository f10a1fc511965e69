//! Model capabilities the toolkit depends on, kept behind traits so that any
//! completion service, masked language model or sentence encoder can be
//! plugged in:
//!
//! - [`TextGenerator`]: prompt completion;
//! - [`Embedder`]: fixed-dimension text embeddings;
//! - [`MaskedLm`] / [`TrainableMaskedLm`]: mask-slot distributions plus the
//!   training contract (`loss_and_update`, `snapshot`, `restore`) the
//!   fine-tuning pipeline drives.
//!
//! [`mock`] holds deterministic implementations of all three; [`http`] holds
//! a remote completion client.

pub mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::fewshot::{AdapetWeights, ClozeEncoding, LabelConditioningExample};

pub use http::HttpCompletionBackend;
pub use mock::{MockEmbedder, MockGenerator, MockMaskedLm};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    /// Worth retrying (timeouts, rate limits, 5xx).
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Permanent(String),
    #[error("backend unavailable after {} attempt(s) for request {request_id}", attempts.len())]
    Unavailable { request_id: String, attempts: Vec<AttemptRecord> },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("cloze has no mask slot")]
    NoMask,
    #[error("unknown checkpoint {0:?}")]
    UnknownCheckpoint(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training failed: {0}")]
    Training(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    pub temperature: f64,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { max_new_tokens: 256, temperature: 0.7, stop_sequences: Vec::new(), seed: None }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidInput("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidInput("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// A completion request. `id` is stable across retries so that remote
/// services can deduplicate.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub id: String,
    pub prompt: String,
    pub params: GenerationParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    /// Ended naturally or at a stop sequence.
    Stop,
    /// Cut off at `max_new_tokens`; the last instance may be a fragment.
    Length,
}

/// Completion text, never including the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub finish: FinishReason,
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<Completion, BackendError>;
}

/// A generator that can be adapted to a corpus before prompting.
pub trait FinetunableGenerator: TextGenerator {
    /// Returns an opaque checkpoint id for the adapted model.
    fn finetune(&mut self, corpus: &[String], seed: u64) -> Result<String, BackendError>;
}

/// Cuts `text` before the earliest stop sequence. Returns whether one matched.
pub fn apply_stop_sequences(text: &mut String, stops: &[String]) -> bool {
    let cut = stops.iter().filter(|s| !s.is_empty()).filter_map(|s| text.find(s.as_str())).min();
    match cut {
        Some(at) => {
            text.truncate(at);
            true
        }
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub request_id: String,
    /// `"ok"` or the error message.
    pub outcome: String,
}

/// Exponential backoff for transient failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, initial_backoff_ms: 500, multiplier: 2.0, max_backoff_ms: 10_000 }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self { max_attempts, initial_backoff_ms: 0, ..Self::default() }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }
}

/// Calls `generator` until success, a non-transient error, or
/// `policy.max_attempts`. The returned log has one entry per attempt.
pub fn generate_with_retry(
    generator: &dyn TextGenerator,
    request: &GenerationRequest,
    policy: &RetryPolicy,
) -> Result<(Completion, Vec<AttemptRecord>), BackendError> {
    request.params.validate()?;
    if request.prompt.is_empty() {
        return Err(BackendError::InvalidInput("empty prompt".into()));
    }
    let mut log = Vec::new();
    let max = policy.max_attempts.max(1);
    for attempt in 1..=max {
        match generator.generate(request) {
            Ok(completion) => {
                log.push(AttemptRecord { attempt, request_id: request.id.clone(), outcome: "ok".into() });
                return Ok((completion, log));
            }
            Err(err) => {
                let transient = matches!(err, BackendError::Transient(_));
                log::warn!("generation request {} attempt {attempt} failed: {err}", request.id);
                log.push(AttemptRecord { attempt, request_id: request.id.clone(), outcome: err.to_string() });
                if !transient {
                    break;
                }
                if attempt < max {
                    std::thread::sleep(policy.backoff(attempt));
                }
            }
        }
    }
    Err(BackendError::Unavailable { request_id: request.id.clone(), attempts: log })
}

/// Fixed-dimension real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Unit-length copy; the zero vector is returned unchanged.
    pub fn normalized(&self) -> EmbeddingVector {
        let n = self.norm();
        if n > 0.0 {
            EmbeddingVector(self.0.iter().map(|x| x / n).collect())
        } else {
            self.clone()
        }
    }

    pub fn scaled(&self, factor: f64) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|x| x * factor).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    /// One vector per text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;
}

/// Per-mask-slot probability vectors over a backend vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDistribution {
    pub rows: Vec<Vec<f64>>,
    pub token_index: BTreeMap<String, usize>,
}

impl MaskDistribution {
    pub fn validate(&self) -> Result<(), BackendError> {
        for (slot, row) in self.rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(BackendError::Permanent(format!("slot {slot} is not a probability simplex")));
            }
        }
        Ok(())
    }

    pub fn prob(&self, slot: usize, token: &str) -> Option<f64> {
        let idx = *self.token_index.get(token)?;
        self.rows.get(slot)?.get(idx).copied()
    }
}

/// Token ↔ index table. Index 0 is always the unknown token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let rest = tokens.into_iter().filter(|t| t != UNKNOWN_TOKEN);
        Vocabulary::new(rest)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

pub const UNKNOWN_TOKEN: &str = "[UNK]";

impl Vocabulary {
    pub fn new(tokens: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut all = vec![UNKNOWN_TOKEN.to_string()];
        for t in tokens {
            let t = normalize_token(&t.into());
            if !t.is_empty() && !all.contains(&t) {
                all.push(t);
            }
        }
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }

    /// The `max_size - 1` most frequent normalized words of `texts` (ties by
    /// word), plus `extra` tokens, which are always included.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize, extra: &[&str]) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                let t = normalize_token(tok);
                if !t.is_empty() {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let budget = max_size.saturating_sub(1 + extra.len());
        let words = extra.iter().map(|s| s.to_string()).chain(ranked.into_iter().take(budget).map(|(w, _)| w));
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(&normalize_token(token)).copied()
    }

    pub fn index_or_unknown(&self, token: &str) -> usize {
        self.get(token).unwrap_or(0)
    }

    pub fn token(&self, idx: usize) -> Option<&str> {
        self.tokens.get(idx).map(String::as_str)
    }

    pub fn token_index(&self) -> BTreeMap<String, usize> {
        self.index.clone()
    }
}

/// Lower-cases and strips surrounding punctuation.
pub fn normalize_token(token: &str) -> String {
    if token == UNKNOWN_TOKEN {
        return token.to_string();
    }
    token.trim_matches(|c: char| !c.is_alphanumeric() && c != '#' && c != '@').to_lowercase()
}

pub trait MaskedLm: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;
    /// One probability row per mask slot, in slot order.
    fn mask_distribution(&self, cloze: &ClozeEncoding) -> Result<MaskDistribution, BackendError>;
    /// Classification-head logits, ordered as [`Label::ALL`].
    fn head_logits(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

/// One masked-modeling item: the cloze text and the original token at each mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedModelingExample {
    pub cloze: ClozeEncoding,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledExample {
    pub cloze: ClozeEncoding,
    pub correct_token: String,
}

/// A mini-batch for one of the training objectives.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainBatch {
    MaskedModeling(Vec<MaskedModelingExample>),
    Head(Vec<(String, Label)>),
    Adapet {
        decoupled: Vec<DecoupledExample>,
        conditioning: Vec<LabelConditioningExample>,
        weights: AdapetWeights,
    },
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        match self {
            TrainBatch::MaskedModeling(v) => v.len(),
            TrainBatch::Head(v) => v.len(),
            TrainBatch::Adapet { decoupled, .. } => decoupled.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Optimizer settings for one update; the learning rate already reflects the
/// schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

/// A masked language model the pipeline can train. Implementations own the
/// optimizer (an adaptive-moment method configured by learning rate and
/// weight decay) and resolve checkpoint ids.
pub trait TrainableMaskedLm: MaskedLm {
    /// Computes the batch loss, applies one optimizer step and returns the loss.
    fn loss_and_update(&mut self, batch: &TrainBatch, step: &StepSettings) -> Result<f64, BackendError>;
    fn snapshot(&mut self, checkpoint: &str) -> Result<(), BackendError>;
    fn restore(&mut self, checkpoint: &str) -> Result<(), BackendError>;
}
