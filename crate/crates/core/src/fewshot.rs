//! Cloze patterns, verbalizers, label prediction and the cloze training losses.
//!
//! An input post is rendered into a pattern such as
//! `"<post> Question : Is this text helpful for cybersecurity experts? Answer : <MASK>. [SEP]"`;
//! the masked language model fills the mask and the verbalizer maps the
//! predicted word back to a label.
//!
//! Two objectives train the model through the mask:
//!
//! - the *decoupled label loss* raises the probability of the correct answer
//!   token and pushes down every other token of the vocabulary,
//!   `L = -ln p(t+) - sum_{t != t+} ln(1 - p(t))`;
//! - *label conditioning* writes a candidate label's answer token into the mask
//!   slot, masks a random subset of post tokens and asks the model to
//!   reconstruct them; reconstruction is encouraged when the candidate label
//!   is the gold label and penalized otherwise.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::MaskDistribution;
use crate::corpus::{Label, LabeledInstance};

pub const POST_MARKER: &str = "[POST]";
pub const MASK_MARKER: &str = "<MASK>";
pub const SEP_MARKER: &str = "[SEP]";

/// The relevance template used for the cyber-threat task.
pub const CYBERSECURITY_TEMPLATE: &str =
    "[POST] Question : Is this text helpful for cybersecurity experts? Answer : <MASK>. [SEP]";

pub const DEFAULT_MASK_RATE: f64 = 0.15;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum FewShotError {
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("invalid verbalizer: {0}")]
    InvalidVerbalizer(String),
    #[error("empty post")]
    EmptyPost,
    #[error("verbalizer token {0:?} is not in the vocabulary")]
    UnresolvableToken(String),
    #[error("distribution has no mask slot")]
    NoMaskSlot,
    #[error("token index {index} out of range for vocabulary of {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("not a probability simplex: {0}")]
    NotSimplex(String),
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("expected {expected} logits, got {got}")]
    LogitCount { expected: usize, got: usize },
    #[error("instance {0:?} has no gold label")]
    Unlabeled(String),
    #[error("mask rate must lie in (0, 1), got {0}")]
    MaskRate(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Literal(String),
    Post,
    Mask,
    Sep,
}

/// A cloze template: literal text around exactly one post slot, at least one
/// mask slot and an optional terminal separator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PatternSpec", into = "PatternSpec")]
pub struct Pattern {
    segments: Vec<Segment>,
    max_post_tokens: usize,
}

/// Config-file form of a [`Pattern`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub template: String,
    #[serde(default = "default_max_post_tokens")]
    pub max_post_tokens: usize,
}

fn default_max_post_tokens() -> usize {
    256
}

impl TryFrom<PatternSpec> for Pattern {
    type Error = FewShotError;

    fn try_from(spec: PatternSpec) -> Result<Self, Self::Error> {
        Pattern::parse(&spec.template, spec.max_post_tokens)
    }
}

impl From<Pattern> for PatternSpec {
    fn from(p: Pattern) -> Self {
        PatternSpec { template: p.template(), max_post_tokens: p.max_post_tokens }
    }
}

impl Default for Pattern {
    fn default() -> Self {
        Pattern::parse(CYBERSECURITY_TEMPLATE, default_max_post_tokens()).expect("built-in template is valid")
    }
}

impl Pattern {
    pub fn new(segments: Vec<Segment>, max_post_tokens: usize) -> Result<Self, FewShotError> {
        let count = |want: &Segment| segments.iter().filter(|s| *s == want).count();
        if count(&Segment::Post) != 1 {
            return Err(FewShotError::InvalidPattern("exactly one POST slot required".into()));
        }
        if count(&Segment::Mask) == 0 {
            return Err(FewShotError::InvalidPattern("at least one MASK slot required".into()));
        }
        if let Some(pos) = segments.iter().position(|s| *s == Segment::Sep) {
            if pos != segments.len() - 1 || count(&Segment::Sep) > 1 {
                return Err(FewShotError::InvalidPattern("SEP must be the terminal segment".into()));
            }
        }
        if max_post_tokens == 0 {
            return Err(FewShotError::InvalidPattern("max_post_tokens must be positive".into()));
        }
        Ok(Self { segments, max_post_tokens })
    }

    /// Parses a template string with `[POST]`, `<MASK>` and `[SEP]` markers.
    pub fn parse(template: &str, max_post_tokens: usize) -> Result<Self, FewShotError> {
        let markers = [(POST_MARKER, Segment::Post), (MASK_MARKER, Segment::Mask), (SEP_MARKER, Segment::Sep)];
        let mut segments = Vec::new();
        let mut rest = template;
        while !rest.is_empty() {
            let next = markers
                .iter()
                .filter_map(|(m, seg)| rest.find(m).map(|at| (at, *m, seg)))
                .min_by_key(|(at, _, _)| *at);
            match next {
                Some((at, marker, seg)) => {
                    if at > 0 {
                        segments.push(Segment::Literal(rest[..at].to_string()));
                    }
                    segments.push(seg.clone());
                    rest = &rest[at + marker.len()..];
                }
                None => {
                    segments.push(Segment::Literal(rest.to_string()));
                    rest = "";
                }
            }
        }
        Self::new(segments, max_post_tokens)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn max_post_tokens(&self) -> usize {
        self.max_post_tokens
    }

    pub fn template(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Literal(t) => t.as_str(),
                Segment::Post => POST_MARKER,
                Segment::Mask => MASK_MARKER,
                Segment::Sep => SEP_MARKER,
            })
            .collect()
    }

    /// Head-truncates the post to `max_post_tokens` whitespace tokens. Posts
    /// within the limit are used verbatim.
    fn fit_post<'a>(&self, post: &'a str) -> Result<std::borrow::Cow<'a, str>, FewShotError> {
        if post.trim().is_empty() {
            return Err(FewShotError::EmptyPost);
        }
        let tokens: Vec<&str> = post.split_whitespace().collect();
        if tokens.len() <= self.max_post_tokens {
            Ok(post.into())
        } else {
            Ok(tokens[..self.max_post_tokens].join(" ").into())
        }
    }

    /// Renders with the post slot and each mask slot filled by the given strings.
    fn render(&self, post: &str, mask_fill: Option<&str>) -> ClozeEncoding {
        let mut text = String::new();
        let mut mask_positions = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(t) => text.push_str(t),
                Segment::Post => text.push_str(post),
                Segment::Sep => text.push_str(SEP_MARKER),
                Segment::Mask => match mask_fill {
                    Some(fill) => text.push_str(fill),
                    None => {
                        mask_positions.push(text.len());
                        text.push_str(MASK_MARKER);
                    }
                },
            }
        }
        ClozeEncoding { text, mask_positions, source_id: None }
    }
}

/// Rendered cloze text. `mask_positions` are byte offsets of each
/// [`MASK_MARKER`] in `text`, in slot order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeEncoding {
    pub text: String,
    pub mask_positions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

impl ClozeEncoding {
    /// Builds an encoding from text that already contains mask markers.
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        let mask_positions = text.match_indices(MASK_MARKER).map(|(i, _)| i).collect();
        Self { text, mask_positions, source_id: None }
    }

    pub fn mask_count(&self) -> usize {
        self.mask_positions.len()
    }
}

/// Label → answer word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<Label, String>", into = "BTreeMap<Label, String>")]
pub struct Verbalizer {
    mapping: BTreeMap<Label, String>,
}

impl TryFrom<BTreeMap<Label, String>> for Verbalizer {
    type Error = FewShotError;

    fn try_from(mapping: BTreeMap<Label, String>) -> Result<Self, Self::Error> {
        Verbalizer::new(mapping)
    }
}

impl From<Verbalizer> for BTreeMap<Label, String> {
    fn from(v: Verbalizer) -> Self {
        v.mapping
    }
}

impl Default for Verbalizer {
    /// `relevant → "yes"`, `irrelevant → "no"`.
    fn default() -> Self {
        Verbalizer::new(BTreeMap::from([
            (Label::Relevant, "yes".to_string()),
            (Label::Irrelevant, "no".to_string()),
        ]))
        .expect("built-in verbalizer is valid")
    }
}

impl Verbalizer {
    pub fn new(mapping: BTreeMap<Label, String>) -> Result<Self, FewShotError> {
        for label in Label::ALL {
            match mapping.get(&label) {
                None => return Err(FewShotError::InvalidVerbalizer(format!("no token for {label}"))),
                Some(t) if t.trim().is_empty() || t.split_whitespace().count() != 1 => {
                    return Err(FewShotError::InvalidVerbalizer(format!("token for {label} must be one word")))
                }
                Some(_) => {}
            }
        }
        let mut tokens: Vec<&String> = mapping.values().collect();
        tokens.sort();
        tokens.dedup();
        if tokens.len() != mapping.len() {
            return Err(FewShotError::InvalidVerbalizer("tokens must be pairwise distinct".into()));
        }
        Ok(Self { mapping })
    }

    pub fn token(&self, label: Label) -> &str {
        &self.mapping[&label]
    }

    pub fn label_of(&self, token: &str) -> Option<Label> {
        self.mapping.iter().find(|(_, t)| t.as_str() == token).map(|(l, _)| *l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &str)> {
        self.mapping.iter().map(|(l, t)| (*l, t.as_str()))
    }

    /// Vocabulary index of every answer token.
    pub fn resolve(&self, token_index: &BTreeMap<String, usize>) -> Result<BTreeMap<Label, usize>, FewShotError> {
        self.iter()
            .map(|(label, tok)| {
                token_index
                    .get(tok)
                    .map(|i| (label, *i))
                    .ok_or_else(|| FewShotError::UnresolvableToken(tok.to_string()))
            })
            .collect()
    }
}

/// Renders `post` into the pattern, leaving every mask slot open.
pub fn apply_pattern(pattern: &Pattern, post: &str) -> Result<ClozeEncoding, FewShotError> {
    let post = pattern.fit_post(post)?;
    Ok(pattern.render(&post, None))
}

/// Cloze encoding of an instance, carrying its id.
pub fn encode_instance(pattern: &Pattern, instance: &LabeledInstance) -> Result<ClozeEncoding, FewShotError> {
    let mut enc = apply_pattern(pattern, &instance.text)?;
    enc.source_id = Some(instance.id.clone());
    Ok(enc)
}

/// Label whose answer token is most probable at the first mask. Ties go to the
/// label that sorts first by name.
pub fn predict_label(dist: &MaskDistribution, verbalizer: &Verbalizer) -> Result<Label, FewShotError> {
    let indices = verbalizer.resolve(&dist.token_index)?;
    let row = dist.rows.first().ok_or(FewShotError::NoMaskSlot)?;
    let mut best: Option<(Label, f64)> = None;
    for (label, idx) in indices {
        let p = *row.get(idx).ok_or(FewShotError::IndexOutOfRange { index: idx, size: row.len() })?;
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((label, p));
        }
    }
    Ok(best.expect("verbalizer maps every label").0)
}

fn check_simplex(p: &[f64]) -> Result<(), FewShotError> {
    if p.is_empty() {
        return Err(FewShotError::NotSimplex("empty vector".into()));
    }
    if let Some(bad) = p.iter().find(|x| !x.is_finite() || **x < 0.0 || **x > 1.0 + SIMPLEX_TOLERANCE) {
        return Err(FewShotError::NotSimplex(format!("entry {bad} outside [0, 1]")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(FewShotError::NotSimplex(format!("sums to {sum}")));
    }
    Ok(())
}

/// `-ln p(t+) - sum_{t != t+} ln(1 - p(t))` over the full vocabulary.
pub fn decoupled_label_loss(dist: &[f64], correct: usize) -> Result<f64, FewShotError> {
    check_simplex(dist)?;
    if correct >= dist.len() {
        return Err(FewShotError::IndexOutOfRange { index: correct, size: dist.len() });
    }
    let mut loss = -dist[correct].min(1.0).ln();
    for (t, p) in dist.iter().enumerate() {
        if t != correct {
            loss -= (-p.min(1.0)).ln_1p();
        }
    }
    // -ln(1) and ln_1p(-0) can produce -0.0.
    Ok(loss.max(0.0))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn check_logits(logits: &[f64]) -> Result<(), FewShotError> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(FewShotError::NonFiniteLogits);
    }
    Ok(())
}

/// Decoupled label loss on softmax(`logits`) and its gradient w.r.t. the logits.
pub fn decoupled_label_loss_grad(logits: &[f64], correct: usize) -> Result<(f64, Vec<f64>), FewShotError> {
    check_logits(logits)?;
    if correct >= logits.len() {
        return Err(FewShotError::IndexOutOfRange { index: correct, size: logits.len() });
    }
    let p = softmax(logits);
    let loss = decoupled_label_loss(&p, correct)?;
    // dL/dp_t+ = -1/p_t+, dL/dp_t = 1/(1 - p_t); the softmax Jacobian is applied
    // in closed form to avoid dividing by probabilities that underflow.
    //   dL/dz_j = sum_i g_i p_i (delta_ij - p_j)
    // For the correct token g_i p_i = -1; for others g_i p_i = p_i / (1 - p_i).
    let weights: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(i, pi)| if i == correct { -1.0 } else { pi / (1.0 - pi) })
        .collect();
    let total: f64 = weights.iter().sum();
    let grad = weights.iter().zip(&p).map(|(w, pj)| w - pj * total).collect();
    Ok((loss, grad))
}

/// Softmax cross-entropy of per-label logits (ordered as [`Label::ALL`]).
pub fn classification_head_loss(logits: &[f64], gold: Label) -> Result<f64, FewShotError> {
    Ok(classification_head_loss_grad(logits, gold)?.0)
}

pub fn classification_head_loss_grad(logits: &[f64], gold: Label) -> Result<(f64, Vec<f64>), FewShotError> {
    check_logits(logits)?;
    if logits.len() != Label::ALL.len() {
        return Err(FewShotError::LogitCount { expected: Label::ALL.len(), got: logits.len() });
    }
    cross_entropy_grad(logits, gold.index())
}

/// `-ln softmax(logits)[target]` with its logit gradient `p - onehot`.
pub fn cross_entropy_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>), FewShotError> {
    check_logits(logits)?;
    if target >= logits.len() {
        return Err(FewShotError::IndexOutOfRange { index: target, size: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = (lse - logits[target]).max(0.0);
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Whether reconstruction of a masked token is rewarded or punished.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetDirection {
    /// Minimize `-ln p(token)`.
    Encourage,
    /// Minimize `-ln(1 - p(token))`.
    Penalize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTarget {
    pub token: String,
    pub direction: TargetDirection,
}

/// A label-conditioned cloze: the answer slot holds the candidate label's word,
/// `cloze.mask_positions` point at the masked post tokens, and `targets`
/// (aligned with those positions) name the original tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelConditioningExample {
    pub cloze: ClozeEncoding,
    pub candidate_label: Label,
    pub gold_label: Label,
    pub targets: Vec<TokenTarget>,
}

/// Per-token label-conditioning loss on softmax(`logits`) and its logit gradient.
pub fn conditioning_token_loss_grad(
    logits: &[f64],
    token: usize,
    direction: TargetDirection,
) -> Result<(f64, Vec<f64>), FewShotError> {
    match direction {
        TargetDirection::Encourage => cross_entropy_grad(logits, token),
        TargetDirection::Penalize => {
            check_logits(logits)?;
            if token >= logits.len() {
                return Err(FewShotError::IndexOutOfRange { index: token, size: logits.len() });
            }
            let p = softmax(logits);
            let pt = p[token];
            let loss = -(-pt).ln_1p();
            // d/dz_j [-ln(1 - p_t)] = p_t (delta_tj - p_j) / (1 - p_t)
            let scale = pt / (1.0 - pt);
            let grad = p
                .iter()
                .enumerate()
                .map(|(j, pj)| scale * (f64::from(u8::from(j == token)) - pj))
                .collect();
            Ok((loss.max(0.0), grad))
        }
    }
}

/// Chooses `max(1, round(rate * n))` distinct token positions out of `n`,
/// returned in ascending order.
pub fn sample_mask_positions(n: usize, rate: f64, seed: u64) -> Result<Vec<usize>, FewShotError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(FewShotError::MaskRate(rate));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = ((rate * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Label-conditioned example for one candidate label.
pub fn label_conditioning_example(
    instance: &LabeledInstance,
    candidate: Label,
    pattern: &Pattern,
    verbalizer: &Verbalizer,
    mask_rate: f64,
    seed: u64,
) -> Result<LabelConditioningExample, FewShotError> {
    let gold = instance.label.ok_or_else(|| FewShotError::Unlabeled(instance.id.clone()))?;
    let post = pattern.fit_post(&instance.text)?;
    let tokens: Vec<&str> = post.split_whitespace().collect();
    let masked = sample_mask_positions(tokens.len(), mask_rate, seed)?;

    let direction = if candidate == gold { TargetDirection::Encourage } else { TargetDirection::Penalize };
    let mut targets = Vec::with_capacity(masked.len());
    let mut rewritten = Vec::with_capacity(tokens.len());
    let mut next = masked.iter().peekable();
    for (i, tok) in tokens.iter().enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
            rewritten.push(MASK_MARKER);
            targets.push(TokenTarget { token: tok.to_string(), direction });
        } else {
            rewritten.push(tok);
        }
    }
    let rendered = pattern.render(&rewritten.join(" "), Some(verbalizer.token(candidate)));
    let mut cloze = ClozeEncoding::from_text(rendered.text);
    cloze.source_id = Some(instance.id.clone());
    debug_assert_eq!(cloze.mask_count(), targets.len());
    Ok(LabelConditioningExample { cloze, candidate_label: candidate, gold_label: gold, targets })
}

/// One label-conditioned example per label, all masking the same positions.
pub fn label_conditioning_batch(
    instance: &LabeledInstance,
    pattern: &Pattern,
    verbalizer: &Verbalizer,
    mask_rate: f64,
    seed: u64,
) -> Result<Vec<LabelConditioningExample>, FewShotError> {
    Label::ALL
        .iter()
        .map(|l| label_conditioning_example(instance, *l, pattern, verbalizer, mask_rate, seed))
        .collect()
}

/// Relative weights of the two cloze objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapetWeights {
    pub decoupled: f64,
    pub conditioning: f64,
}

impl Default for AdapetWeights {
    fn default() -> Self {
        Self { decoupled: 1.0, conditioning: 1.0 }
    }
}
