//! Centroid-distance filtering of generated candidates with an expert review band.
//!
//! Candidates are embedded together with the original instances of their
//! class, ranked by distance to the originals' centroid and split by a
//! threshold `τ` into keep and drop regions. Candidates within `δ` of the
//! threshold stay pending for an expert.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{Decision, GeneratedCandidate};
use crate::backends::{BackendError, Embedder, EmbeddingVector};
use crate::corpus::{Label, LabeledInstance, Provenance, META_GENERATION_JOB, META_SOURCE_CLASS};

pub const META_DECISION: &str = "decision";
pub const META_DISTANCE: &str = "distance";

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("no vectors given")]
    EmptyInput,
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding count {found} does not match {expected} texts")]
    CountMismatch { expected: usize, found: usize },
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("keep fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("stale version {seen}; current version is {current}")]
    StaleVersion { seen: u64, current: u64 },
    #[error("unknown candidate {0:?}")]
    UnknownCandidate(String),
    #[error("{0} candidates still pending")]
    PendingRemain(usize),
    #[error("only expert decisions can be recorded, got {0:?}")]
    NotExpertDecision(Decision),
    #[error("non-finite embedding")]
    NonFinite,
    #[error(transparent)]
    Embedding(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    CosineDistance,
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        match self {
            Metric::CosineDistance => (1.0 - cosine_similarity(a, b)).clamp(0.0, 2.0),
            Metric::Euclidean => a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

/// Cosine similarity in `[-1, 1]`; 0 when either vector is zero.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (a.dot(b) / denom).clamp(-1.0, 1.0)
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub metric: Metric,
    /// Unit-normalize every embedding before computing the centroid.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { metric: Metric::CosineDistance, normalize: true }
    }
}

/// The original instance most similar to a candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterpartRecord {
    pub original_id: String,
    pub original_text: String,
    pub cosine_similarity: f64,
    pub levenshtein_distance: usize,
}

/// An original instance with its embedding, as a counterpart search pool entry.
#[derive(Debug, Clone, PartialEq)]
pub struct OriginalRef<'a> {
    pub id: &'a str,
    pub text: &'a str,
    pub embedding: &'a EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChange {
    pub version: u64,
    #[serde(with = "crate::util::extended_f64")]
    pub tau: f64,
    #[serde(with = "crate::util::extended_f64")]
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    pub pending: usize,
}

/// Ranked candidates of one job with their decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub job_id: String,
    pub class_label: Label,
    pub metric: Metric,
    pub normalized: bool,
    pub centroid: EmbeddingVector,
    #[serde(default, with = "crate::util::extended_f64_opt")]
    pub threshold: Option<f64>,
    #[serde(default, with = "crate::util::extended_f64")]
    pub delta: f64,
    /// Sorted ascending by distance, ties by candidate id.
    pub candidates: Vec<GeneratedCandidate>,
    pub version: u64,
    #[serde(default)]
    pub threshold_history: Vec<ThresholdChange>,
}

/// Arithmetic mean per component.
pub fn compute_centroid(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector, FilterError> {
    let first = vectors.first().ok_or(FilterError::EmptyInput)?;
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for v in vectors {
        if v.dim() != dim {
            return Err(FilterError::DimensionMismatch { expected: dim, found: v.dim() });
        }
        for (s, x) in sum.iter_mut().zip(&v.0) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(EmbeddingVector(sum.into_iter().map(|s| s / n).collect()))
}

fn prepare(vectors: &[EmbeddingVector], config: &FilterConfig) -> Result<Vec<EmbeddingVector>, FilterError> {
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFinite);
    }
    Ok(if config.normalize { vectors.iter().map(EmbeddingVector::normalized).collect() } else { vectors.to_vec() })
}

/// Fills every candidate's distance to the centroid of `original_embeddings`
/// and sorts the candidates. All decisions start pending and no threshold is set.
pub fn rank_candidates(
    job_id: &str,
    class_label: Label,
    mut candidates: Vec<GeneratedCandidate>,
    candidate_embeddings: &[EmbeddingVector],
    original_embeddings: &[EmbeddingVector],
    config: &FilterConfig,
) -> Result<FilterState, FilterError> {
    if candidate_embeddings.len() != candidates.len() {
        return Err(FilterError::CountMismatch { expected: candidates.len(), found: candidate_embeddings.len() });
    }
    let originals = prepare(original_embeddings, config)?;
    let centroid = compute_centroid(&originals)?;
    let cands = prepare(candidate_embeddings, config)?;
    for (c, e) in candidates.iter_mut().zip(&cands) {
        if e.dim() != centroid.dim() {
            return Err(FilterError::DimensionMismatch { expected: centroid.dim(), found: e.dim() });
        }
        c.distance = Some(config.metric.distance(e, &centroid));
        c.decision = Decision::Pending;
    }
    sort_candidates(&mut candidates);
    Ok(FilterState {
        job_id: job_id.to_string(),
        class_label,
        metric: config.metric,
        normalized: config.normalize,
        centroid,
        threshold: None,
        delta: 0.0,
        candidates,
        version: 0,
        threshold_history: Vec::new(),
    })
}

fn sort_candidates(candidates: &mut [GeneratedCandidate]) {
    candidates.sort_by(|a, b| {
        let (da, db) = (a.distance.unwrap_or(f64::INFINITY), b.distance.unwrap_or(f64::INFINITY));
        da.total_cmp(&db).then_with(|| a.id.cmp(&b.id))
    });
}

/// Embeds candidates and originals with `embedder`, ranks the candidates and
/// attaches each one's nearest original counterpart.
pub fn embed_and_rank(
    job_id: &str,
    class_label: Label,
    candidates: Vec<GeneratedCandidate>,
    originals: &[LabeledInstance],
    embedder: &dyn Embedder,
    config: &FilterConfig,
) -> Result<FilterState, FilterError> {
    if originals.is_empty() {
        return Err(FilterError::EmptyInput);
    }
    let cand_texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
    let orig_texts: Vec<String> = originals.iter().map(|o| o.text.clone()).collect();
    let cand_emb = embedder.embed(&cand_texts)?;
    let orig_emb = embedder.embed(&orig_texts)?;
    if orig_emb.len() != originals.len() {
        return Err(FilterError::CountMismatch { expected: originals.len(), found: orig_emb.len() });
    }
    let mut state = rank_candidates(job_id, class_label, candidates, &cand_emb, &orig_emb, config)?;

    let pool: Vec<OriginalRef> = originals
        .iter()
        .zip(&orig_emb)
        .map(|(o, e)| OriginalRef { id: &o.id, text: &o.text, embedding: e })
        .collect();
    let by_id: std::collections::HashMap<&str, &EmbeddingVector> =
        cand_texts.iter().zip(&cand_emb).map(|(t, e)| (t.as_str(), e)).collect();
    for c in &mut state.candidates {
        let emb = by_id[c.text.as_str()];
        c.nearest = Some(nearest_counterpart(&c.text, emb, &pool)?);
    }
    Ok(state)
}

/// Character-level edit distance (insertions, deletions, substitutions).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Similarities this close count as equal, so that duplicate directions
/// (say, the same embedding at two scales) resolve to the smallest id.
pub const SIMILARITY_TIE_TOLERANCE: f64 = 1e-12;

/// The original with the highest cosine similarity (ties: smallest id), with
/// that pair's Levenshtein distance.
pub fn nearest_counterpart(
    text: &str,
    embedding: &EmbeddingVector,
    originals: &[OriginalRef],
) -> Result<CounterpartRecord, FilterError> {
    let mut sims = Vec::with_capacity(originals.len());
    for o in originals {
        if o.embedding.dim() != embedding.dim() {
            return Err(FilterError::DimensionMismatch { expected: embedding.dim(), found: o.embedding.dim() });
        }
        sims.push(cosine_similarity(embedding, o.embedding));
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (o, sim) = originals
        .iter()
        .zip(sims)
        .filter(|(_, s)| max - s <= SIMILARITY_TIE_TOLERANCE)
        .min_by(|a, b| a.0.id.cmp(b.0.id))
        .ok_or(FilterError::EmptyInput)?;
    Ok(CounterpartRecord {
        original_id: o.id.to_string(),
        original_text: o.text.to_string(),
        cosine_similarity: sim,
        levenshtein_distance: levenshtein(text, o.text),
    })
}

fn sorted_distances(state: &FilterState) -> Vec<f64> {
    let mut d: Vec<f64> = state.candidates.iter().filter_map(|c| c.distance).collect();
    d.sort_by(f64::total_cmp);
    d
}

/// Nearest-rank quantile of a sorted sample; `q = 0` gives the minimum.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Distance at the `keep_fraction` quantile (nearest rank).
pub fn suggest_threshold(state: &FilterState, keep_fraction: f64) -> Result<f64, FilterError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(FilterError::InvalidFraction(keep_fraction));
    }
    let d = sorted_distances(state);
    if d.is_empty() {
        return Err(FilterError::EmptyInput);
    }
    Ok(nearest_rank(&d, keep_fraction))
}

/// Half the inter-decile gap around `tau`: with `F` the fraction of distances
/// at or below `tau`, `δ = (Q(F + 0.1) − Q(F − 0.1)) / 2`, quantiles clamped to `[0, 1]`.
pub fn default_review_delta(state: &FilterState, tau: f64) -> Result<f64, FilterError> {
    let d = sorted_distances(state);
    if d.is_empty() {
        return Err(FilterError::EmptyInput);
    }
    let f = d.iter().filter(|x| **x <= tau).count() as f64 / d.len() as f64;
    let hi = nearest_rank(&d, (f + 0.1).min(1.0));
    let lo = nearest_rank(&d, (f - 0.1).max(0.0));
    Ok(((hi - lo) / 2.0).max(0.0))
}

fn validate_threshold(tau: f64, delta: f64) -> Result<(), FilterError> {
    if tau.is_nan() || tau < 0.0 {
        return Err(FilterError::InvalidThreshold(format!("τ must be non-negative, got {tau}")));
    }
    if delta.is_nan() || delta < 0.0 {
        return Err(FilterError::InvalidThreshold(format!("δ must be non-negative, got {delta}")));
    }
    Ok(())
}

/// Recomputes automatic decisions: distance ≤ τ−δ keeps, ≥ τ+δ drops,
/// anything in between is pending. Expert decisions are preserved.
pub fn apply_threshold(state: &mut FilterState, tau: f64, delta: f64) -> Result<(), FilterError> {
    validate_threshold(tau, delta)?;
    let lower = if tau.is_infinite() { f64::INFINITY } else { tau - delta };
    let upper = tau + delta;
    for c in &mut state.candidates {
        let d = c.distance.unwrap_or(f64::INFINITY);
        let auto = if d <= lower {
            Decision::AutoKeep
        } else if d >= upper {
            Decision::AutoDrop
        } else {
            Decision::Pending
        };
        c.recompute_automatic(auto);
    }
    state.threshold = Some(tau);
    state.delta = delta;
    state.version += 1;
    state.threshold_history.push(ThresholdChange { version: state.version, tau, delta });
    Ok(())
}

impl FilterState {
    fn check_version(&self, seen: u64) -> Result<(), FilterError> {
        if seen != self.version {
            return Err(FilterError::StaleVersion { seen, current: self.version });
        }
        Ok(())
    }

    /// [`apply_threshold`] guarded by the version the caller last saw.
    pub fn set_threshold(&mut self, tau: f64, delta: f64, seen_version: u64) -> Result<DecisionCounts, FilterError> {
        self.check_version(seen_version)?;
        apply_threshold(self, tau, delta)?;
        Ok(self.counts())
    }

    /// Records an expert decision (overwriting an earlier one if present).
    pub fn record_decision(&mut self, candidate_id: &str, decision: Decision, seen_version: u64) -> Result<u64, FilterError> {
        if !decision.is_expert() {
            return Err(FilterError::NotExpertDecision(decision));
        }
        self.check_version(seen_version)?;
        let c = self
            .candidates
            .iter_mut()
            .find(|c| c.id == candidate_id)
            .ok_or_else(|| FilterError::UnknownCandidate(candidate_id.to_string()))?;
        c.set_decision(decision).map_err(|_| FilterError::NotExpertDecision(decision))?;
        self.version += 1;
        Ok(self.version)
    }

    pub fn candidate(&self, id: &str) -> Option<&GeneratedCandidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    pub fn counts(&self) -> DecisionCounts {
        let mut counts = DecisionCounts { total: self.candidates.len(), ..Default::default() };
        for c in &self.candidates {
            if c.decision.is_kept() {
                counts.kept += 1;
            } else if c.decision.is_dropped() {
                counts.dropped += 1;
            } else {
                counts.pending += 1;
            }
        }
        counts
    }

    /// Whether `distance` lies in the review band `[τ−δ, τ+δ]`.
    pub fn in_band(&self, distance: f64) -> bool {
        match self.threshold {
            Some(tau) => distance >= tau - self.delta && distance <= tau + self.delta,
            None => true,
        }
    }

    /// Counts of candidate distances in `bins` equal-width bins spanning
    /// `[min, max]`. Returns `(edges, counts)` with `edges.len() == bins + 1`.
    pub fn histogram(&self, bins: usize) -> (Vec<f64>, Vec<usize>) {
        let d = sorted_distances(self);
        let bins = bins.max(1);
        let (Some(&lo), Some(&hi)) = (d.first(), d.last()) else {
            return (Vec::new(), Vec::new());
        };
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for x in d {
            let i = (((x - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        (edges, counts)
    }

    pub fn save(&self, path: &Path) -> Result<(), FilterError> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        crate::util::write_atomic(path, &json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Kept candidates as generated instances of the job's class. Fails while
/// any candidate is still pending.
pub fn export_filtered(state: &FilterState) -> Result<Vec<LabeledInstance>, FilterError> {
    let pending = state.counts().pending;
    if pending > 0 {
        return Err(FilterError::PendingRemain(pending));
    }
    Ok(state
        .candidates
        .iter()
        .filter(|c| c.decision.is_kept())
        .map(|c| {
            let mut inst = LabeledInstance::new(format!("gen-{}", c.id), c.text.clone(), Some(state.class_label));
            inst.provenance = Provenance::Generated;
            inst.meta.insert(META_GENERATION_JOB.into(), state.job_id.clone());
            inst.meta.insert(META_SOURCE_CLASS.into(), state.class_label.to_string());
            inst.meta.insert(META_DECISION.into(), serde_json::to_value(c.decision).unwrap().as_str().unwrap().into());
            if let Some(d) = c.distance {
                inst.meta.insert(META_DISTANCE.into(), format!("{d}"));
            }
            inst
        })
        .collect())
}
