//! Class-conditioned generation of new training instances.
//!
//! Three prompt styles are supported:
//!
//! - [`AugmentMode::ClassPrompt`]: every instance of one class prefixed with a
//!   class priming token (`"cybersecurity ->"`, `"other ->"`), one per line,
//!   with the priming token repeated at the end as the generation hook. The
//!   model may continue with several instances, each introduced by the token.
//! - [`AugmentMode::IndexedShort`]: instances wrapped as
//!   `"<|startoftext|> |i| text <|endoftext|>"` and generation prefixed by
//!   `"<|startoftext|> |k|"` for source `k`.
//! - [`AugmentMode::LongContext`]: generation prefixed by
//!   `"<|startoftext|> " + context`, where the context is extracted from a long
//!   document (by default its title).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    generate_with_retry, AttemptRecord, BackendError, FinetunableGenerator, FinishReason, GenerationParams,
    GenerationRequest, RetryPolicy, TextGenerator,
};
use crate::corpus::{Label, LabeledInstance};
use crate::filter::CounterpartRecord;
use crate::util::sha256_hex;

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";
pub const RELEVANT_PRIMING: &str = "cybersecurity ->";
pub const IRRELEVANT_PRIMING: &str = "other ->";
pub const DEFAULT_SEPARATOR: &str = "\n";
pub const DEFAULT_MIN_FRAGMENT_CHARS: usize = 10;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation job: {0}")]
    InvalidJob(String),
    #[error("no instances to prime")]
    NoInstances,
    #[error("instance {0:?} has empty text")]
    EmptyText(String),
    #[error("context extractor found no context in instance {0:?}")]
    NoContext(String),
    #[error("illegal decision change {from:?} -> {to:?} for candidate {candidate}")]
    IllegalTransition { candidate: String, from: Decision, to: Decision },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    ClassPrompt,
    IndexedShort,
    LongContext,
}

/// Picks the conditioning part of a long document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextExtractor {
    /// Text between the `xxtitle` and `xxbodytext` markers.
    Markers,
    /// The first `count` whitespace tokens.
    FirstTokens { count: usize },
}

impl ContextExtractor {
    pub fn extract(&self, text: &str) -> Option<String> {
        let context = match self {
            ContextExtractor::Markers => {
                let start = text.find("xxtitle")? + "xxtitle".len();
                let end = start + text[start..].find("xxbodytext")?;
                text[start..end].trim().to_string()
            }
            ContextExtractor::FirstTokens { count } => {
                text.split_whitespace().take(*count).collect::<Vec<_>>().join(" ")
            }
        };
        (!context.is_empty()).then_some(context)
    }
}

fn default_n() -> usize {
    1
}
fn default_separator() -> String {
    DEFAULT_SEPARATOR.to_string()
}
fn default_min_fragment() -> usize {
    DEFAULT_MIN_FRAGMENT_CHARS
}
fn default_budget() -> usize {
    32
}
fn default_in_flight() -> usize {
    4
}

/// Serializable description of an augmentation job (everything except the
/// source instances).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationJobSpec {
    pub id: String,
    pub class_label: Label,
    pub priming_token: String,
    #[serde(default = "default_n")]
    pub n_per_instance: usize,
    pub mode: AugmentMode,
    #[serde(default)]
    pub context_extractor: Option<ContextExtractor>,
    #[serde(default)]
    pub generation: GenerationParams,
    #[serde(default = "default_separator")]
    pub separator: String,
    #[serde(default = "default_min_fragment")]
    pub min_fragment_chars: usize,
    /// Prompt budget in characters; larger class prompts use a seeded subset.
    #[serde(default)]
    pub max_prompt_chars: Option<usize>,
    /// Maximum number of generation calls.
    #[serde(default = "default_budget")]
    pub attempt_budget: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Adapt the generator to the primed corpus before prompting.
    #[serde(default)]
    pub finetune: bool,
    #[serde(default)]
    pub seed: u64,
}

impl AugmentationJobSpec {
    pub fn new(id: impl Into<String>, class_label: Label, priming_token: impl Into<String>, mode: AugmentMode) -> Self {
        Self {
            id: id.into(),
            class_label,
            priming_token: priming_token.into(),
            n_per_instance: default_n(),
            mode,
            context_extractor: (mode == AugmentMode::LongContext).then_some(ContextExtractor::Markers),
            generation: GenerationParams::default(),
            separator: default_separator(),
            min_fragment_chars: default_min_fragment(),
            max_prompt_chars: None,
            attempt_budget: default_budget(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            finetune: false,
            seed: 0,
        }
    }

    /// Class-prompt job with the conventional priming token for `label`.
    pub fn for_class(id: impl Into<String>, label: Label) -> Self {
        let token = match label {
            Label::Relevant => RELEVANT_PRIMING,
            Label::Irrelevant => IRRELEVANT_PRIMING,
        };
        Self::new(id, label, token, AugmentMode::ClassPrompt)
    }

    fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidJob(format!("{}: {m}", self.id)));
        if self.id.is_empty() {
            return bad("empty job id");
        }
        if self.priming_token.trim().is_empty() {
            return bad("priming token must be non-empty");
        }
        if self.n_per_instance == 0 {
            return bad("n_per_instance must be positive");
        }
        if self.mode == AugmentMode::LongContext && self.context_extractor.is_none() {
            return bad("long_context mode needs a context extractor");
        }
        if self.attempt_budget == 0 || self.max_in_flight == 0 {
            return bad("attempt_budget and max_in_flight must be positive");
        }
        if self.separator.is_empty() {
            return bad("separator must be non-empty");
        }
        self.generation.validate().map_err(|e| AugmentError::InvalidJob(e.to_string()))
    }
}

/// A validated job together with its source instances (all of its class).
#[derive(Debug, Clone)]
pub struct AugmentationJob {
    spec: AugmentationJobSpec,
    sources: Vec<LabeledInstance>,
}

impl AugmentationJob {
    pub fn new(spec: AugmentationJobSpec, sources: Vec<LabeledInstance>) -> Result<Self, AugmentError> {
        spec.validate()?;
        if sources.is_empty() {
            return Err(AugmentError::NoInstances);
        }
        if let Some(odd) = sources.iter().find(|s| s.label != Some(spec.class_label)) {
            return Err(AugmentError::InvalidJob(format!(
                "source {:?} is not labeled {}",
                odd.id, spec.class_label
            )));
        }
        if let Some(bad) = sources.iter().find(|s| s.text.contains(&spec.priming_token)) {
            return Err(AugmentError::InvalidJob(format!("source {:?} contains the priming token", bad.id)));
        }
        Ok(Self { spec, sources })
    }

    pub fn spec(&self) -> &AugmentationJobSpec {
        &self.spec
    }

    pub fn sources(&self) -> &[LabeledInstance] {
        &self.sources
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn quota(&self) -> usize {
        self.spec.n_per_instance * self.sources.len()
    }
}

/// Review state of a generated candidate. Automatic decisions may be replaced
/// by expert ones; expert decisions are never replaced by automation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    #[default]
    Pending,
    AutoKeep,
    AutoDrop,
    ExpertKeep,
    ExpertDrop,
}

impl Decision {
    pub fn is_expert(self) -> bool {
        matches!(self, Decision::ExpertKeep | Decision::ExpertDrop)
    }

    pub fn is_automatic(self) -> bool {
        matches!(self, Decision::AutoKeep | Decision::AutoDrop)
    }

    pub fn is_kept(self) -> bool {
        matches!(self, Decision::AutoKeep | Decision::ExpertKeep)
    }

    pub fn is_dropped(self) -> bool {
        matches!(self, Decision::AutoDrop | Decision::ExpertDrop)
    }

    /// Allowed explicit transitions: pending → anything decided,
    /// automatic → expert, expert → expert (experts may revise).
    pub fn can_become(self, to: Decision) -> bool {
        match self {
            Decision::Pending => to != Decision::Pending,
            Decision::AutoKeep | Decision::AutoDrop => to.is_expert(),
            Decision::ExpertKeep | Decision::ExpertDrop => to.is_expert(),
        }
    }
}

/// One generated instance awaiting filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCandidate {
    pub id: String,
    pub text: String,
    pub job_id: String,
    /// Position among all candidates parsed for the job.
    pub parse_position: usize,
    pub call_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    #[serde(default)]
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nearest: Option<CounterpartRecord>,
}

impl GeneratedCandidate {
    pub fn new(job_id: &str, parse_position: usize, call_index: usize, text: String) -> Self {
        Self {
            id: format!("{job_id}-{parse_position:05}"),
            text,
            job_id: job_id.to_string(),
            parse_position,
            call_index,
            distance: None,
            decision: Decision::Pending,
            nearest: None,
        }
    }

    pub fn set_decision(&mut self, to: Decision) -> Result<(), AugmentError> {
        if !self.decision.can_become(to) {
            return Err(AugmentError::IllegalTransition { candidate: self.id.clone(), from: self.decision, to });
        }
        self.decision = to;
        Ok(())
    }

    /// Replaces an automatic or pending decision after a threshold change.
    /// Expert decisions are left untouched.
    pub(crate) fn recompute_automatic(&mut self, to: Decision) {
        debug_assert!(!to.is_expert());
        if !self.decision.is_expert() {
            self.decision = to;
        }
    }
}

/// Class prompt with `"\n"` between instances.
pub fn prime_class_corpus<S: AsRef<str>>(texts: &[S], priming_token: &str) -> Result<String, AugmentError> {
    prime_class_corpus_with(texts, priming_token, DEFAULT_SEPARATOR)
}

/// `token + " " + text` per instance joined by `separator`, then
/// `separator + token` as the generation hook.
pub fn prime_class_corpus_with<S: AsRef<str>>(
    texts: &[S],
    priming_token: &str,
    separator: &str,
) -> Result<String, AugmentError> {
    if texts.is_empty() {
        return Err(AugmentError::NoInstances);
    }
    let mut prompt = String::new();
    for (i, text) in texts.iter().enumerate() {
        let text = text.as_ref();
        if text.trim().is_empty() {
            return Err(AugmentError::EmptyText(format!("#{}", i + 1)));
        }
        prompt.push_str(priming_token);
        prompt.push(' ');
        prompt.push_str(text);
        prompt.push_str(separator);
    }
    prompt.push_str(priming_token);
    Ok(prompt)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimedEntry {
    pub source_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimedCorpus {
    pub mode: AugmentMode,
    pub entries: Vec<PrimedEntry>,
}

/// `"<|startoftext|> |i| " + text + " <|endoftext|>"` for i = 1..N.
pub fn prime_indexed_short(instances: &[LabeledInstance]) -> Result<PrimedCorpus, AugmentError> {
    if instances.is_empty() {
        return Err(AugmentError::NoInstances);
    }
    let entries = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            if inst.text.trim().is_empty() {
                return Err(AugmentError::EmptyText(inst.id.clone()));
            }
            Ok(PrimedEntry { source_id: inst.id.clone(), text: indexed_wrapper(i + 1, &inst.text) })
        })
        .collect::<Result<_, _>>()?;
    Ok(PrimedCorpus { mode: AugmentMode::IndexedShort, entries })
}

fn indexed_prefix(index: usize) -> String {
    format!("{START_TOKEN} |{index}|")
}

fn indexed_wrapper(index: usize, text: &str) -> String {
    format!("{} {text} {END_TOKEN}", indexed_prefix(index))
}

/// Inverse of the indexed wrapper: `(i, text)`.
pub fn strip_indexed_wrapper(entry: &str) -> Option<(usize, String)> {
    let rest = entry.strip_prefix(START_TOKEN)?.strip_prefix(" |")?;
    let bar = rest.find('|')?;
    let index = rest[..bar].parse().ok()?;
    let body = rest[bar + 1..].strip_prefix(' ')?.strip_suffix(END_TOKEN)?.strip_suffix(' ')?;
    Some((index, body.to_string()))
}

/// `"<|startoftext|> " + context`.
pub fn build_long_prompt(instance: &LabeledInstance, extractor: &ContextExtractor) -> Result<String, AugmentError> {
    let context = extractor.extract(&instance.text).ok_or_else(|| AugmentError::NoContext(instance.id.clone()))?;
    Ok(format!("{START_TOKEN} {context}"))
}

/// Segments of a completion whose instances are introduced by `priming_token`.
pub fn parse_completion(completion: &str, priming_token: &str) -> Vec<String> {
    parse_completion_with(completion, priming_token, &ParseOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    pub min_fragment_chars: usize,
    /// The completion was cut off at the token budget, so its last segment may
    /// be an unfinished instance.
    pub truncated: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { min_fragment_chars: DEFAULT_MIN_FRAGMENT_CHARS, truncated: false }
    }
}

/// Splits on every `priming_token`, trims, drops empty segments and, for
/// truncated completions, a final segment shorter than the minimum length.
pub fn parse_completion_with(completion: &str, priming_token: &str, opts: &ParseOptions) -> Vec<String> {
    let segments = completion.split(priming_token).map(str::trim).filter(|s| !s.is_empty());
    finish_segments(segments.map(str::to_string).collect(), opts)
}

/// Segments of a completion in the wrapped formats: split on
/// `<|endoftext|>`, with any leading `<|startoftext|>` (and `|i|`) removed.
pub fn parse_wrapped_completion(completion: &str, opts: &ParseOptions) -> Vec<String> {
    let segments = completion
        .split(END_TOKEN)
        .map(|seg| {
            let seg = seg.trim();
            let seg = seg.strip_prefix(START_TOKEN).map(str::trim_start).unwrap_or(seg);
            let seg = strip_index_marker(seg).unwrap_or(seg);
            seg.replace(START_TOKEN, " ").trim().to_string()
        })
        .filter(|s| !s.is_empty())
        .collect();
    finish_segments(segments, opts)
}

fn strip_index_marker(seg: &str) -> Option<&str> {
    let rest = seg.strip_prefix('|')?;
    let bar = rest.find('|')?;
    rest[..bar].parse::<usize>().ok()?;
    Some(rest[bar + 1..].trim_start())
}

fn finish_segments(mut segments: Vec<String>, opts: &ParseOptions) -> Vec<String> {
    if opts.truncated {
        if let Some(last) = segments.last() {
            if last.chars().count() < opts.min_fragment_chars {
                segments.pop();
            }
        }
    }
    segments
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_index: usize,
    pub request_id: String,
    pub prompt_sha256: String,
    pub attempts: Vec<AttemptRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish: Option<FinishReason>,
    pub parsed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Audit record of a job run: one entry per generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobManifest {
    pub job: AugmentationJobSpec,
    pub source_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_checkpoint: Option<String>,
    pub quota: usize,
    pub produced: usize,
    pub calls: Vec<CallRecord>,
}

impl JobManifest {
    pub fn save(&self, path: &Path) -> Result<(), AugmentError> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        crate::util::write_atomic(path, &json)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub candidates: Vec<GeneratedCandidate>,
    pub manifest: JobManifest,
    pub warnings: Vec<String>,
}

impl GenerationOutcome {
    pub fn quota_met(&self) -> bool {
        self.candidates.len() >= self.manifest.quota
    }
}

/// Adapts `generator` to the job's primed corpus (the optional fine-tuning
/// step). Returns the generator checkpoint id.
pub fn finetune_generator(job: &AugmentationJob, generator: &mut dyn FinetunableGenerator) -> Result<String, AugmentError> {
    let corpus: Vec<String> = match job.spec.mode {
        AugmentMode::ClassPrompt => {
            job.sources.iter().map(|s| format!("{} {}", job.spec.priming_token, s.text)).collect()
        }
        AugmentMode::IndexedShort => prime_indexed_short(&job.sources)?.entries.into_iter().map(|e| e.text).collect(),
        AugmentMode::LongContext => job.sources.iter().map(|s| format!("{START_TOKEN} {} {END_TOKEN}", s.text)).collect(),
    };
    Ok(generator.finetune(&corpus, job.spec.seed)?)
}

struct PromptPlan<'a> {
    job: &'a AugmentationJob,
    /// Per-source prompt suffix (wrapped modes) or empty (class mode).
    hooks: Vec<String>,
    context: Option<String>,
}

impl<'a> PromptPlan<'a> {
    fn new(job: &'a AugmentationJob) -> Result<Self, AugmentError> {
        let spec = &job.spec;
        let (hooks, context) = match spec.mode {
            AugmentMode::ClassPrompt => (Vec::new(), None),
            AugmentMode::IndexedShort => {
                let hooks = (1..=job.sources.len()).map(indexed_prefix).collect();
                let context = (!spec.finetune).then(|| {
                    let primed = prime_indexed_short(&job.sources)?;
                    let joined: Vec<String> = primed.entries.into_iter().map(|e| e.text).collect();
                    Ok::<_, AugmentError>(joined.join(&spec.separator))
                });
                (hooks, context.transpose()?)
            }
            AugmentMode::LongContext => {
                let extractor = spec.context_extractor.as_ref().expect("validated");
                let hooks = job.sources.iter().map(|s| build_long_prompt(s, extractor)).collect::<Result<_, _>>()?;
                (hooks, None)
            }
        };
        Ok(Self { job, hooks, context })
    }

    fn prompt(&self, call: usize) -> Result<String, AugmentError> {
        let spec = &self.job.spec;
        match spec.mode {
            AugmentMode::ClassPrompt => {
                let texts = self.class_subset(call);
                prime_class_corpus_with(&texts, &spec.priming_token, &spec.separator)
            }
            AugmentMode::IndexedShort => {
                let hook = &self.hooks[call % self.hooks.len()];
                Ok(match &self.context {
                    Some(ctx) => format!("{ctx}{}{hook}", spec.separator),
                    None => hook.clone(),
                })
            }
            AugmentMode::LongContext => Ok(self.hooks[call % self.hooks.len()].clone()),
        }
    }

    /// All source texts, or a seeded subset that fits the prompt budget.
    fn class_subset(&self, call: usize) -> Vec<&'a str> {
        let spec = &self.job.spec;
        let all: Vec<&str> = self.job.sources.iter().map(|s| s.text.as_str()).collect();
        let Some(budget) = spec.max_prompt_chars else { return all };
        let cost = |t: &str| spec.priming_token.len() + 1 + t.len() + spec.separator.len();
        let total: usize = all.iter().map(|t| cost(t)).sum::<usize>() + spec.priming_token.len();
        if total <= budget {
            return all;
        }
        let mut order: Vec<usize> = (0..all.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (call as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        let mut used = spec.priming_token.len();
        let mut picked = Vec::new();
        for i in order {
            let c = cost(all[i]);
            if picked.is_empty() || used + c <= budget {
                used += c;
                picked.push(i);
            }
        }
        picked.sort_unstable();
        picked.into_iter().map(|i| all[i]).collect()
    }

    fn parse(&self, completion: &str, truncated: bool) -> Vec<String> {
        let spec = &self.job.spec;
        let opts = ParseOptions { min_fragment_chars: spec.min_fragment_chars, truncated };
        match spec.mode {
            AugmentMode::ClassPrompt => parse_completion_with(completion, &spec.priming_token, &opts),
            AugmentMode::IndexedShort | AugmentMode::LongContext => parse_wrapped_completion(completion, &opts)
                .into_iter()
                .map(|s| s.replace(&spec.priming_token, " ").trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }
}

/// Prompts `generator` until the job quota (`n_per_instance` × sources) is
/// met or the call budget is spent. Calls run in waves of at most
/// `max_in_flight`; results are folded in call order, so the outcome is
/// deterministic for a deterministic generator. Falling short of the quota is
/// reported as a warning, not an error.
pub fn generate_candidates(job: &AugmentationJob, generator: &dyn TextGenerator) -> Result<GenerationOutcome, AugmentError> {
    let spec = &job.spec;
    let plan = PromptPlan::new(job)?;
    let quota = job.quota();
    let mut candidates: Vec<GeneratedCandidate> = Vec::new();
    let mut calls = Vec::new();
    let mut warnings = Vec::new();

    let mut next = 0;
    while candidates.len() < quota && next < spec.attempt_budget {
        let wave: Vec<usize> = (next..(next + spec.max_in_flight).min(spec.attempt_budget)).collect();
        next += wave.len();

        let prompts: Vec<String> = wave.iter().map(|c| plan.prompt(*c)).collect::<Result<_, _>>()?;
        let requests: Vec<GenerationRequest> = wave
            .iter()
            .zip(prompts)
            .map(|(c, prompt)| {
                let mut params = spec.generation.clone();
                params.seed = Some(params.seed.unwrap_or(spec.seed).wrapping_add(*c as u64));
                GenerationRequest { id: format!("{}-call{c:04}", spec.id), prompt, params }
            })
            .collect();

        let results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = requests
                .iter()
                .map(|req| scope.spawn(|| generate_with_retry(generator, req, &spec.retry)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(BackendError::Permanent("generator panicked".into()))))
                .collect()
        });

        for ((call_index, request), result) in wave.iter().zip(&requests).zip(results) {
            let mut record = CallRecord {
                call_index: *call_index,
                request_id: request.id.clone(),
                prompt_sha256: sha256_hex(request.prompt.as_bytes()),
                attempts: Vec::new(),
                finish: None,
                parsed: 0,
                error: None,
            };
            match result {
                Ok((completion, attempts)) => {
                    record.attempts = attempts;
                    record.finish = Some(completion.finish);
                    let text = completion.text.strip_prefix(request.prompt.as_str()).unwrap_or(&completion.text);
                    let parsed = plan.parse(text, completion.finish == FinishReason::Length);
                    record.parsed = parsed.len();
                    for segment in parsed {
                        let pos = candidates.len();
                        candidates.push(GeneratedCandidate::new(&spec.id, pos, *call_index, segment));
                    }
                }
                Err(err) => {
                    if let BackendError::Unavailable { attempts, .. } = &err {
                        record.attempts = attempts.clone();
                    }
                    record.error = Some(err.to_string());
                    warnings.push(format!("call {call_index} failed: {err}"));
                }
            }
            calls.push(record);
        }
    }

    if candidates.len() < quota {
        let msg = format!(
            "job {}: produced {} of {quota} candidates within a budget of {} calls",
            spec.id,
            candidates.len(),
            spec.attempt_budget
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let manifest = JobManifest {
        job: spec.clone(),
        source_ids: job.sources.iter().map(|s| s.id.clone()).collect(),
        generator_checkpoint: None,
        quota,
        produced: candidates.len(),
        calls,
    };
    Ok(GenerationOutcome { candidates, manifest, warnings })
}

pub fn write_candidates(path: &Path, candidates: &[GeneratedCandidate]) -> Result<(), AugmentError> {
    let mut buf = Vec::new();
    for c in candidates {
        serde_json::to_writer(&mut buf, c)?;
        buf.push(b'\n');
    }
    crate::util::write_atomic(path, &buf)?;
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<Vec<GeneratedCandidate>, AugmentError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(AugmentError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Completion, MockGenerator};
    use proptest::prelude::*;

    fn inst(id: &str, text: &str, label: Label) -> LabeledInstance {
        LabeledInstance::new(id, text, Some(label))
    }

    #[test]
    fn class_prompt_layout() {
        assert_eq!(
            prime_class_corpus(&["a", "b"], RELEVANT_PRIMING).unwrap(),
            "cybersecurity -> a\ncybersecurity -> b\ncybersecurity ->"
        );
        assert_eq!(prime_class_corpus(&["x"], IRRELEVANT_PRIMING).unwrap(), "other -> x\nother ->");
        assert!(matches!(prime_class_corpus(&["  "], RELEVANT_PRIMING), Err(AugmentError::EmptyText(_))));
        assert!(matches!(prime_class_corpus::<&str>(&[], RELEVANT_PRIMING), Err(AugmentError::NoInstances)));
    }

    #[test]
    fn indexed_wrappers() {
        let sources = vec![inst("a", "first", Label::Relevant), inst("b", "hello", Label::Relevant), inst("c", "x", Label::Relevant)];
        let primed = prime_indexed_short(&sources).unwrap();
        assert_eq!(primed.entries[1].text, "<|startoftext|> |2| hello <|endoftext|>");
        let indices: Vec<usize> = primed.entries.iter().map(|e| strip_indexed_wrapper(&e.text).unwrap().0).collect();
        assert_eq!(indices, vec![1, 2, 3]);
        assert!(matches!(
            prime_indexed_short(&[inst("e", "", Label::Relevant)]),
            Err(AugmentError::EmptyText(_))
        ));
    }

    #[test]
    fn long_prompt_from_markers() {
        let doc = inst("d", "xxtitle Flood hits city xxbodytext Long report follows", Label::Relevant);
        assert_eq!(build_long_prompt(&doc, &ContextExtractor::Markers).unwrap(), "<|startoftext|> Flood hits city");
        let plain = inst("p", "no markers here", Label::Relevant);
        assert!(matches!(build_long_prompt(&plain, &ContextExtractor::Markers), Err(AugmentError::NoContext(id)) if id == "p"));
        let five = build_long_prompt(&doc, &ContextExtractor::FirstTokens { count: 5 }).unwrap();
        assert_eq!(five, "<|startoftext|> xxtitle Flood hits city xxbodytext");
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_completion("first tweet cybersecurity -> second tweet", RELEVANT_PRIMING),
            vec!["first tweet", "second tweet"]
        );
        assert_eq!(parse_completion("only one instance", RELEVANT_PRIMING), vec!["only one instance"]);
        assert_eq!(parse_completion("a cybersecurity -> cybersecurity -> b", RELEVANT_PRIMING), vec!["a", "b"]);
    }

    #[test]
    fn truncated_fragment_dropped() {
        let opts = ParseOptions { truncated: true, ..Default::default() };
        assert_eq!(
            parse_completion_with("a complete tweet here\ncybersecurity -> half", RELEVANT_PRIMING, &opts),
            vec!["a complete tweet here"]
        );
    }

    #[test]
    fn wrapped_parse() {
        let c = "new text here <|endoftext|>\n<|startoftext|> |3| another one <|endoftext|>";
        assert_eq!(parse_wrapped_completion(c, &ParseOptions::default()), vec!["new text here", "another one"]);
    }

    #[test]
    fn decision_transitions() {
        use Decision::*;
        assert!(Pending.can_become(AutoKeep));
        assert!(AutoKeep.can_become(ExpertDrop));
        assert!(ExpertKeep.can_become(ExpertDrop));
        assert!(!ExpertKeep.can_become(AutoKeep));
        assert!(!AutoKeep.can_become(Pending));
        let mut c = GeneratedCandidate::new("j", 0, 0, "t".into());
        c.set_decision(ExpertDrop).unwrap();
        assert!(c.set_decision(AutoKeep).is_err());
        c.recompute_automatic(AutoKeep);
        assert_eq!(c.decision, ExpertDrop);
    }

    fn job(n: usize, sources: Vec<LabeledInstance>) -> Result<AugmentationJob, AugmentError> {
        let mut spec = AugmentationJobSpec::for_class("pos", Label::Relevant);
        spec.n_per_instance = n;
        spec.retry = RetryPolicy::immediate(2);
        AugmentationJob::new(spec, sources)
    }

    fn positives() -> Vec<LabeledInstance> {
        vec![
            inst("p1", "hackers breach new servers at a major bank today", Label::Relevant),
            inst("p2", "critical patch released for actively exploited vpn flaw", Label::Relevant),
        ]
    }

    #[test]
    fn quota_met_with_mock() {
        let j = job(2, positives()).unwrap();
        let gen = MockGenerator::new(positives().into_iter().map(|i| i.text), RELEVANT_PRIMING);
        let out = generate_candidates(&j, &gen).unwrap();
        assert!(out.candidates.len() >= 4);
        assert!(out.candidates.iter().all(|c| c.decision == Decision::Pending && c.job_id == "pos"));
        assert!(out.candidates.iter().all(|c| !c.text.contains(RELEVANT_PRIMING)));
        assert!(out.warnings.is_empty());
        let again = generate_candidates(&j, &gen).unwrap();
        assert_eq!(out.candidates, again.candidates);
    }

    #[test]
    fn zero_n_rejected() {
        assert!(matches!(job(0, positives()), Err(AugmentError::InvalidJob(_))));
    }

    #[test]
    fn mixed_class_sources_rejected() {
        let mut s = positives();
        s.push(inst("n1", "weather is nice", Label::Irrelevant));
        assert!(matches!(job(1, s), Err(AugmentError::InvalidJob(_))));
    }

    struct Down;
    impl TextGenerator for Down {
        fn generate(&self, _: &GenerationRequest) -> Result<Completion, BackendError> {
            Err(BackendError::Transient("connection refused".into()))
        }
    }

    #[test]
    fn failing_backend_gives_partial_result() {
        let j = job(2, positives()).unwrap();
        let out = generate_candidates(&j, &Down).unwrap();
        assert!(out.candidates.is_empty());
        assert!(!out.warnings.is_empty());
        assert_eq!(out.manifest.calls.len(), j.spec().attempt_budget);
        assert!(out.manifest.calls.iter().all(|c| c.attempts.len() == 2));
    }

    #[test]
    fn prompt_budget_samples_whole_instances() {
        let sources: Vec<LabeledInstance> =
            (0..20).map(|i| inst(&format!("s{i}"), &format!("instance number {i} about malware"), Label::Relevant)).collect();
        let mut spec = AugmentationJobSpec::for_class("pos", Label::Relevant);
        spec.max_prompt_chars = Some(200);
        let j = AugmentationJob::new(spec, sources.clone()).unwrap();
        let plan = PromptPlan::new(&j).unwrap();
        let prompt = plan.prompt(0).unwrap();
        assert!(prompt.len() <= 200);
        assert!(prompt.ends_with(RELEVANT_PRIMING));
        for seg in parse_completion(prompt.strip_suffix(RELEVANT_PRIMING).unwrap(), RELEVANT_PRIMING) {
            assert!(sources.iter().any(|s| s.text == seg));
        }
    }

    proptest! {
        #[test]
        fn class_prompt_round_trip(texts in prop::collection::vec("[a-z][a-z ]{0,30}[a-z]", 1..12)) {
            let prompt = prime_class_corpus(&texts, RELEVANT_PRIMING).unwrap();
            let body = prompt.strip_suffix(RELEVANT_PRIMING).unwrap();
            let parsed = parse_completion(body, RELEVANT_PRIMING);
            let expected: Vec<String> = texts.iter().map(|t| t.trim().to_string()).collect();
            prop_assert_eq!(parsed, expected);
        }
    }
}
