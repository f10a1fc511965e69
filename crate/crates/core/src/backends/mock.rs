//! Deterministic stand-ins for the three model capabilities.
//!
//! Every output is a pure function of the inputs and the construction seed,
//! using only platform-independent hashing and a ChaCha stream.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    apply_stop_sequences, normalize_token, BackendError, Completion, EmbeddingVector, Embedder,
    FinetunableGenerator, FinishReason, GenerationRequest, MaskDistribution, MaskedLm, StepSettings,
    TextGenerator, TrainBatch, TrainableMaskedLm, Vocabulary,
};
use crate::corpus::Label;
use crate::fewshot::{
    classification_head_loss_grad, conditioning_token_loss_grad, cross_entropy_grad, decoupled_label_loss_grad,
    softmax, ClozeEncoding, MASK_MARKER,
};
use crate::util::fnv1a;

const SYNONYMS: &[(&str, &str)] = &[
    ("attack", "exploit"),
    ("attacks", "exploits"),
    ("vulnerability", "flaw"),
    ("vulnerabilities", "flaws"),
    ("patch", "fix"),
    ("update", "upgrade"),
    ("hackers", "attackers"),
    ("breach", "leak"),
    ("new", "fresh"),
    ("critical", "severe"),
    ("servers", "hosts"),
    ("users", "customers"),
    ("warning", "alert"),
    ("great", "good"),
    ("today", "now"),
];

const SUFFIXES: &[&str] = &["#infosec", "#cybersecurity", "(thread)", "via @threatpost", "#breaking", "- read more"];

/// Completion backend that emits perturbed copies of registered texts.
///
/// Each completion holds a few instances separated by `"\n" + separator + " "`,
/// mimicking a model that keeps following the priming pattern. Perturbations
/// are synonym swaps, a dropped leading word, a truncated ending, an appended
/// suffix token, or a verbatim repeat.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    texts: Vec<String>,
    separator: String,
    instances_per_completion: usize,
    seed: u64,
}

impl MockGenerator {
    pub fn new(texts: impl IntoIterator<Item = impl Into<String>>, separator: impl Into<String>) -> Self {
        Self {
            texts: texts.into_iter().map(Into::into).collect(),
            separator: separator.into(),
            instances_per_completion: 3,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_instances_per_completion(mut self, n: usize) -> Self {
        self.instances_per_completion = n.max(1);
        self
    }

    pub fn registered(&self) -> &[String] {
        &self.texts
    }

    fn perturb(&self, text: &str, rng: &mut ChaCha8Rng) -> String {
        let mut words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if rng.random_bool(0.1) {
            return words.join(" ");
        }
        for w in &mut words {
            let lower = w.to_lowercase();
            if let Some((_, to)) = SYNONYMS.iter().find(|(from, _)| *from == lower) {
                if rng.random_bool(0.6) {
                    *w = (*to).to_string();
                }
            }
        }
        if words.len() > 4 && rng.random_bool(0.3) {
            words.remove(0);
        }
        if words.len() > 4 && rng.random_bool(0.3) {
            let cut = rng.random_range(1..=2);
            words.truncate(words.len() - cut);
        }
        if rng.random_bool(0.4) {
            words.push((*SUFFIXES.choose(rng).expect("non-empty")).to_string());
        }
        words.join(" ")
    }
}

impl TextGenerator for MockGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        request.params.validate()?;
        if request.prompt.is_empty() {
            return Err(BackendError::InvalidInput("empty prompt".into()));
        }
        if self.texts.is_empty() {
            return Err(BackendError::Permanent("mock generator has no registered texts".into()));
        }
        let seed = fnv1a(self.seed ^ request.params.seed.unwrap_or(0), request.prompt.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let glue = format!("\n{} ", self.separator);
        let mut text = String::new();
        for i in 0..self.instances_per_completion {
            if i > 0 {
                text.push_str(&glue);
            }
            let source = self.texts.choose(&mut rng).expect("non-empty");
            text.push_str(&self.perturb(source, &mut rng));
        }

        let mut finish = FinishReason::Stop;
        let tokens: Vec<&str> = text.split(' ').collect();
        if tokens.len() > request.params.max_new_tokens {
            text = tokens[..request.params.max_new_tokens].join(" ");
            finish = FinishReason::Length;
        }
        if apply_stop_sequences(&mut text, &request.params.stop_sequences) {
            text.truncate(text.trim_end().len());
            finish = FinishReason::Stop;
        }
        Ok(Completion { text, finish })
    }
}

impl FinetunableGenerator for MockGenerator {
    /// "Learns" the corpus by registering it as the source of future completions.
    fn finetune(&mut self, corpus: &[String], seed: u64) -> Result<String, BackendError> {
        if corpus.is_empty() {
            return Err(BackendError::InvalidInput("empty fine-tuning corpus".into()));
        }
        self.texts = corpus.to_vec();
        let mut digest = seed;
        for t in corpus {
            digest = fnv1a(digest, t.as_bytes());
        }
        Ok(format!("mockgen-{digest:016x}"))
    }
}

/// Character-trigram embedder: every trigram of the lower-cased, space-padded
/// text adds a seeded pseudo-random sign vector; the sum is unit-normalized.
/// Texts sharing most trigrams therefore land close together.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self { dim: 16, seed: 0 }
    }
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn embed_one(&self, text: &str) -> EmbeddingVector {
        let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = [0u8; 12];
        for window in padded.windows(3) {
            let mut len = 0;
            for c in window {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let mut bits = fnv1a(self.seed, &buf[..len]);
            for (j, slot) in v.iter_mut().enumerate() {
                if j > 0 && j % 64 == 0 {
                    bits = fnv1a(bits, &buf[..len]);
                }
                *slot += if bits >> (j % 64) & 1 == 1 { 1.0 } else { -1.0 };
            }
        }
        EmbeddingVector(v).normalized()
    }
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidInput("nothing to embed".into()));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

const FEATURES: usize = 128;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// A small trainable masked language model.
///
/// Context is encoded as hashed sparse features (bag of words plus the words
/// adjacent to the mask); a linear layer maps them to vocabulary logits and a
/// second linear layer to classification-head logits. Training uses AdamW.
#[derive(Debug, Clone)]
pub struct MockMaskedLm {
    vocab: Vocabulary,
    theta: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: i32,
    checkpoints: BTreeMap<String, Vec<f64>>,
}

type SparseFeatures = Vec<(usize, f64)>;

impl MockMaskedLm {
    pub fn new(vocab: Vocabulary, seed: u64) -> Self {
        let n = FEATURES * vocab.len() + vocab.len() + FEATURES * 2 + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
        Self { vocab, theta, adam_m: vec![0.0; n], adam_v: vec![0.0; n], adam_t: 0, checkpoints: BTreeMap::new() }
    }

    pub fn parameter_count(&self) -> usize {
        self.theta.len()
    }

    fn v(&self) -> usize {
        self.vocab.len()
    }

    fn out_bias(&self) -> usize {
        FEATURES * self.v()
    }

    fn head_w(&self) -> usize {
        self.out_bias() + self.v()
    }

    fn head_b(&self) -> usize {
        self.head_w() + FEATURES * 2
    }

    fn feature(key: &str) -> usize {
        (fnv1a(17, key.as_bytes()) % FEATURES as u64) as usize
    }

    /// Sparse context features; with `mask_at`, also the neighbours of the
    /// mask starting at that byte offset.
    fn features(text: &str, mask_at: Option<usize>) -> SparseFeatures {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        let words: Vec<String> = text
            .split_whitespace()
            .filter(|w| !w.contains(MASK_MARKER))
            .map(normalize_token)
            .filter(|w| !w.is_empty())
            .collect();
        let scale = 1.0 / (words.len().max(1) as f64).sqrt();
        for w in &words {
            *acc.entry(Self::feature(&format!("w:{w}"))).or_default() += scale;
        }
        if let Some(at) = mask_at {
            let prev = text[..at].split_whitespace().next_back().map(normalize_token).unwrap_or_default();
            let after = &text[(at + MASK_MARKER.len()).min(text.len())..];
            let next = after.split_whitespace().next().map(normalize_token).unwrap_or_default();
            *acc.entry(Self::feature(&format!("p:{prev}"))).or_default() += 1.0;
            *acc.entry(Self::feature(&format!("n:{next}"))).or_default() += 1.0;
        }
        acc.into_iter().collect()
    }

    fn vocab_logits(&self, x: &SparseFeatures) -> Vec<f64> {
        let v = self.v();
        let mut z = self.theta[self.out_bias()..self.out_bias() + v].to_vec();
        for (f, val) in x {
            let row = &self.theta[f * v..(f + 1) * v];
            for (zi, w) in z.iter_mut().zip(row) {
                *zi += val * w;
            }
        }
        z
    }

    fn vocab_backward(&self, grad: &mut [f64], x: &SparseFeatures, dz: &[f64], weight: f64) {
        let v = self.v();
        let bias = self.out_bias();
        for (i, g) in dz.iter().enumerate() {
            grad[bias + i] += weight * g;
        }
        for (f, val) in x {
            for (i, g) in dz.iter().enumerate() {
                grad[f * v + i] += weight * val * g;
            }
        }
    }

    fn head(&self, x: &SparseFeatures) -> Vec<f64> {
        let (hw, hb) = (self.head_w(), self.head_b());
        let mut z = vec![self.theta[hb], self.theta[hb + 1]];
        for (f, val) in x {
            z[0] += val * self.theta[hw + f * 2];
            z[1] += val * self.theta[hw + f * 2 + 1];
        }
        z
    }

    fn head_backward(&self, grad: &mut [f64], x: &SparseFeatures, dz: &[f64], weight: f64) {
        let (hw, hb) = (self.head_w(), self.head_b());
        for c in 0..2 {
            grad[hb + c] += weight * dz[c];
            for (f, val) in x {
                grad[hw + f * 2 + c] += weight * val * dz[c];
            }
        }
    }

    fn accumulate(&self, batch: &TrainBatch, grad: &mut [f64]) -> Result<f64, BackendError> {
        let fail = |e: crate::fewshot::FewShotError| BackendError::Training(e.to_string());
        let mut loss = 0.0;
        match batch {
            TrainBatch::MaskedModeling(examples) => {
                let slots: usize = examples.iter().map(|e| e.targets.len()).sum();
                let w = 1.0 / slots.max(1) as f64;
                for ex in examples {
                    for (pos, target) in ex.cloze.mask_positions.iter().zip(&ex.targets) {
                        let x = Self::features(&ex.cloze.text, Some(*pos));
                        let idx = self.vocab.index_or_unknown(target);
                        let (l, dz) = cross_entropy_grad(&self.vocab_logits(&x), idx).map_err(fail)?;
                        loss += w * l;
                        self.vocab_backward(grad, &x, &dz, w);
                    }
                }
            }
            TrainBatch::Head(items) => {
                let w = 1.0 / items.len().max(1) as f64;
                for (text, label) in items {
                    let x = Self::features(text, None);
                    let (l, dz) = classification_head_loss_grad(&self.head(&x), *label).map_err(fail)?;
                    loss += w * l;
                    self.head_backward(grad, &x, &dz, w);
                }
            }
            TrainBatch::Adapet { decoupled, conditioning, weights } => {
                let w = weights.decoupled / decoupled.len().max(1) as f64;
                for ex in decoupled {
                    let pos = *ex.cloze.mask_positions.first().ok_or(BackendError::NoMask)?;
                    let idx = self.vocab.get(&ex.correct_token).ok_or_else(|| {
                        BackendError::Training(format!("answer token {:?} not in vocabulary", ex.correct_token))
                    })?;
                    let x = Self::features(&ex.cloze.text, Some(pos));
                    let (l, dz) = decoupled_label_loss_grad(&self.vocab_logits(&x), idx).map_err(fail)?;
                    loss += w * l;
                    self.vocab_backward(grad, &x, &dz, w);
                }
                let tokens: usize = conditioning.iter().map(|e| e.targets.len()).sum();
                let w = weights.conditioning / tokens.max(1) as f64;
                for ex in conditioning {
                    for (pos, target) in ex.cloze.mask_positions.iter().zip(&ex.targets) {
                        let x = Self::features(&ex.cloze.text, Some(*pos));
                        let idx = self.vocab.index_or_unknown(&target.token);
                        let (l, dz) =
                            conditioning_token_loss_grad(&self.vocab_logits(&x), idx, target.direction).map_err(fail)?;
                        loss += w * l;
                        self.vocab_backward(grad, &x, &dz, w);
                    }
                }
            }
        }
        Ok(loss)
    }

    fn adam_step(&mut self, grad: &[f64], step: &StepSettings) {
        self.adam_t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.adam_t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.adam_t);
        for i in 0..self.theta.len() {
            let g = grad[i];
            self.adam_m[i] = ADAM_BETA1 * self.adam_m[i] + (1.0 - ADAM_BETA1) * g;
            self.adam_v[i] = ADAM_BETA2 * self.adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
            let update = (self.adam_m[i] / bc1) / ((self.adam_v[i] / bc2).sqrt() + ADAM_EPS);
            self.theta[i] -= step.learning_rate * (update + step.weight_decay * self.theta[i]);
        }
    }
}

impl MaskedLm for MockMaskedLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn mask_distribution(&self, cloze: &ClozeEncoding) -> Result<MaskDistribution, BackendError> {
        if cloze.mask_positions.is_empty() {
            return Err(BackendError::NoMask);
        }
        let rows = cloze
            .mask_positions
            .iter()
            .map(|pos| softmax(&self.vocab_logits(&Self::features(&cloze.text, Some(*pos)))))
            .collect();
        Ok(MaskDistribution { rows, token_index: self.vocab.token_index() })
    }

    fn head_logits(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        debug_assert_eq!(Label::ALL.len(), 2);
        Ok(self.head(&Self::features(text, None)))
    }
}

impl TrainableMaskedLm for MockMaskedLm {
    fn loss_and_update(&mut self, batch: &TrainBatch, step: &StepSettings) -> Result<f64, BackendError> {
        if batch.is_empty() {
            return Err(BackendError::Training("empty batch".into()));
        }
        let mut grad = vec![0.0; self.theta.len()];
        let loss = self.accumulate(batch, &mut grad)?;
        if !loss.is_finite() {
            return Err(BackendError::Training(format!("non-finite loss {loss}")));
        }
        self.adam_step(&grad, step);
        Ok(loss)
    }

    fn snapshot(&mut self, checkpoint: &str) -> Result<(), BackendError> {
        self.checkpoints.insert(checkpoint.to_string(), self.theta.clone());
        Ok(())
    }

    /// Loads the parameters and starts a fresh optimizer state.
    fn restore(&mut self, checkpoint: &str) -> Result<(), BackendError> {
        let theta = self
            .checkpoints
            .get(checkpoint)
            .ok_or_else(|| BackendError::UnknownCheckpoint(checkpoint.to_string()))?;
        self.theta.clone_from(theta);
        self.adam_m.iter_mut().for_each(|m| *m = 0.0);
        self.adam_v.iter_mut().for_each(|v| *v = 0.0);
        self.adam_t = 0;
        Ok(())
    }
}
