//! Expert review of filter states over HTTP.
//!
//! Each job lives in `<data-dir>/jobs/<job-id>/state.json`. Mutations of one
//! job are serialized by a per-job lock and written to disk (atomically, with
//! fsync) before they are acknowledged. Every mutation carries the state
//! version the client last saw; stale versions get `409 Conflict` together
//! with the current version and counts.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/jobs` | job summaries |
//! | GET | `/jobs/{id}/candidates?filter=all\|pending\|band&page=&page_size=` | ranked candidates |
//! | PUT | `/jobs/{id}/threshold` | `{"tau", "delta"?, "version"}` |
//! | PUT | `/jobs/{id}/candidates/{cid}/decision` | `{"decision": "expert_keep"\|"expert_drop", "version"}` |
//! | GET | `/jobs/{id}/export` | kept instances as JSON lines |
//! | GET | `/jobs/{id}/stats?bins=` | counts and distance histogram |

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Decision;
use crate::filter::{
    default_review_delta, export_filtered, CounterpartRecord, DecisionCounts, FilterError, FilterState,
};

pub const STATE_FILE: &str = "state.json";
pub const ENV_LISTEN: &str = "CTI_REVIEW_LISTEN";
pub const ENV_DATA_DIR: &str = "CTI_DATA_DIR";
pub const ENV_TOKEN: &str = "CTI_REVIEW_TOKEN";
pub const DEFAULT_PAGE_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("unknown candidate {0:?}")]
    UnknownCandidate(String),
    #[error("stale version {seen}; current version is {current}")]
    Conflict { seen: u64, current: u64, counts: DecisionCounts },
    #[error("{0}")]
    Invalid(String),
    #[error("{0} candidates still pending")]
    PendingRemain(usize),
    #[error("missing or wrong access token")]
    Unauthorized,
    #[error("storage error: {0}")]
    Storage(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownJob(_) | ServiceError::UnknownCandidate(_) => "not_found",
            ServiceError::Conflict { .. } => "conflict",
            ServiceError::Invalid(_) => "invalid_request",
            ServiceError::PendingRemain(_) => "pending_remain",
            ServiceError::Unauthorized => "unauthorized",
            ServiceError::Storage(_) => "storage_error",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownJob(_) | ServiceError::UnknownCandidate(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::PendingRemain(_) => StatusCode::PRECONDITION_FAILED,
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Error payload: machine-readable `code`, human `message`, and for
/// conflicts the current version and counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<DecisionCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<usize>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let mut body = ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
            current_version: None,
            counts: None,
            pending: None,
        };
        match &self {
            ServiceError::Conflict { current, counts, .. } => {
                body.current_version = Some(*current);
                body.counts = Some(*counts);
            }
            ServiceError::PendingRemain(n) => body.pending = Some(*n),
            _ => {}
        }
        (self.status(), Json(body)).into_response()
    }
}

fn valid_job_id(id: &str) -> bool {
    !id.is_empty() && id != "." && id != ".." && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

pub fn job_dir(data_dir: &Path, job_id: &str) -> PathBuf {
    data_dir.join("jobs").join(job_id)
}

/// Writes a job's state where the service will find it.
pub fn save_job_state(data_dir: &Path, state: &FilterState) -> Result<PathBuf, FilterError> {
    if !valid_job_id(&state.job_id) {
        return Err(FilterError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("job id {:?} may only contain letters, digits, '-', '_' and '.'", state.job_id),
        )));
    }
    let dir = job_dir(data_dir, &state.job_id);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(STATE_FILE);
    state.save(&path)?;
    Ok(path)
}

pub fn load_job_state(data_dir: &Path, job_id: &str) -> Result<FilterState, FilterError> {
    FilterState::load(&job_dir(data_dir, job_id).join(STATE_FILE))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateFilter {
    #[default]
    All,
    Pending,
    Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: String,
    pub class_label: crate::corpus::Label,
    pub version: u64,
    pub counts: DecisionCounts,
    #[serde(default)]
    pub threshold: Option<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub id: String,
    pub text: String,
    pub distance: Option<f64>,
    pub decision: Decision,
    #[serde(default)]
    pub nearest: Option<CounterpartRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePage {
    pub job_id: String,
    pub version: u64,
    pub filter: CandidateFilter,
    pub page: usize,
    pub page_size: usize,
    /// Number of candidates matching the filter, over all pages.
    pub total: usize,
    pub items: Vec<CandidateView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRequest {
    pub tau: f64,
    /// Review band half-width; the inter-decile default when omitted.
    #[serde(default)]
    pub delta: Option<f64>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResponse {
    pub version: u64,
    pub tau: f64,
    pub delta: f64,
    pub counts: DecisionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: Decision,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionAck {
    pub version: u64,
    pub candidate_id: String,
    pub decision: Decision,
    pub counts: DecisionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStats {
    pub job_id: String,
    pub version: u64,
    pub counts: DecisionCounts,
    pub threshold: Option<f64>,
    pub delta: f64,
    pub histogram: Histogram,
}

/// One job's state behind its writer lock.
type JobSlot = Arc<Mutex<FilterState>>;

/// The review workflow over a data directory, independent of HTTP.
pub struct ReviewService {
    data_dir: PathBuf,
    jobs: Mutex<BTreeMap<String, JobSlot>>,
}

fn storage(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(e.to_string())
}

impl ReviewService {
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let data_dir = data_dir.into();
        std::fs::create_dir_all(data_dir.join("jobs")).map_err(storage)?;
        Ok(Self { data_dir, jobs: Mutex::new(BTreeMap::new()) })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn job_ids_on_disk(&self) -> Result<Vec<String>, ServiceError> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(self.data_dir.join("jobs")).map_err(storage)? {
            let entry = entry.map_err(storage)?;
            let name = entry.file_name().to_string_lossy().to_string();
            if valid_job_id(&name) && entry.path().join(STATE_FILE).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn slot(&self, job_id: &str) -> Result<JobSlot, ServiceError> {
        if !valid_job_id(job_id) {
            return Err(ServiceError::UnknownJob(job_id.to_string()));
        }
        let mut jobs = self.jobs.lock().expect("job table lock");
        if let Some(s) = jobs.get(job_id) {
            return Ok(s.clone());
        }
        let path = job_dir(&self.data_dir, job_id).join(STATE_FILE);
        if !path.is_file() {
            return Err(ServiceError::UnknownJob(job_id.to_string()));
        }
        let state = FilterState::load(&path).map_err(storage)?;
        let slot = Arc::new(Mutex::new(state));
        jobs.insert(job_id.to_string(), slot.clone());
        Ok(slot)
    }

    fn snapshot(&self, job_id: &str) -> Result<FilterState, ServiceError> {
        Ok(self.slot(job_id)?.lock().expect("job lock").clone())
    }

    /// Applies `f` to a copy of the state, persists the copy and only then
    /// publishes it. A failed write leaves the published state untouched.
    fn mutate<T>(
        &self,
        job_id: &str,
        f: impl FnOnce(&mut FilterState) -> Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        let slot = self.slot(job_id)?;
        let mut guard = slot.lock().expect("job lock");
        let mut next = guard.clone();
        let out = f(&mut next)?;
        save_job_state(&self.data_dir, &next).map_err(storage)?;
        *guard = next;
        Ok(out)
    }

    pub fn list_jobs(&self) -> Result<Vec<JobSummary>, ServiceError> {
        self.job_ids_on_disk()?
            .into_iter()
            .map(|id| {
                let s = self.snapshot(&id)?;
                Ok(JobSummary {
                    job_id: s.job_id.clone(),
                    class_label: s.class_label,
                    version: s.version,
                    counts: s.counts(),
                    threshold: s.threshold.filter(|t| t.is_finite()),
                    delta: s.delta,
                })
            })
            .collect()
    }

    pub fn list_candidates(
        &self,
        job_id: &str,
        filter: CandidateFilter,
        page: usize,
        page_size: usize,
    ) -> Result<CandidatePage, ServiceError> {
        if page_size == 0 {
            return Err(ServiceError::Invalid("page_size must be positive".into()));
        }
        let s = self.snapshot(job_id)?;
        let matching: Vec<CandidateView> = s
            .candidates
            .iter()
            .filter(|c| match filter {
                CandidateFilter::All => true,
                CandidateFilter::Pending => c.decision == Decision::Pending,
                CandidateFilter::Band => s.threshold.is_some() && c.distance.is_some_and(|d| s.in_band(d)),
            })
            .map(|c| CandidateView {
                id: c.id.clone(),
                text: c.text.clone(),
                distance: c.distance,
                decision: c.decision,
                nearest: c.nearest.clone(),
            })
            .collect();
        let total = matching.len();
        let items = matching.into_iter().skip(page.saturating_mul(page_size)).take(page_size).collect();
        Ok(CandidatePage { job_id: s.job_id, version: s.version, filter, page, page_size, total, items })
    }

    fn conflict(state: &FilterState, seen: u64) -> ServiceError {
        ServiceError::Conflict { seen, current: state.version, counts: state.counts() }
    }

    pub fn set_threshold(&self, job_id: &str, req: &ThresholdRequest) -> Result<ThresholdResponse, ServiceError> {
        if !(req.tau.is_finite() && req.tau >= 0.0) {
            return Err(ServiceError::Invalid(format!("tau must be a non-negative number, got {}", req.tau)));
        }
        if let Some(d) = req.delta {
            if !(d.is_finite() && d >= 0.0) {
                return Err(ServiceError::Invalid(format!("delta must be a non-negative number, got {d}")));
            }
        }
        self.mutate(job_id, |s| {
            if s.version != req.version {
                return Err(Self::conflict(s, req.version));
            }
            let delta = match req.delta {
                Some(d) => d,
                None if s.candidates.is_empty() => 0.0,
                None => default_review_delta(s, req.tau).map_err(|e| ServiceError::Invalid(e.to_string()))?,
            };
            let counts = s.set_threshold(req.tau, delta, req.version).map_err(|e| ServiceError::Invalid(e.to_string()))?;
            Ok(ThresholdResponse { version: s.version, tau: req.tau, delta, counts })
        })
    }

    pub fn record_decision(&self, job_id: &str, candidate_id: &str, req: &DecisionRequest) -> Result<DecisionAck, ServiceError> {
        if !req.decision.is_expert() {
            return Err(ServiceError::Invalid(format!(
                "decision must be expert_keep or expert_drop, got {:?}",
                req.decision
            )));
        }
        self.mutate(job_id, |s| {
            if s.candidate(candidate_id).is_none() {
                return Err(ServiceError::UnknownCandidate(candidate_id.to_string()));
            }
            if s.version != req.version {
                return Err(Self::conflict(s, req.version));
            }
            let version = s.record_decision(candidate_id, req.decision, req.version).map_err(|e| match e {
                FilterError::StaleVersion { seen, .. } => Self::conflict(s, seen),
                other => ServiceError::Invalid(other.to_string()),
            })?;
            Ok(DecisionAck { version, candidate_id: candidate_id.to_string(), decision: req.decision, counts: s.counts() })
        })
    }

    /// Kept instances as JSON lines.
    pub fn export(&self, job_id: &str) -> Result<String, ServiceError> {
        let s = self.snapshot(job_id)?;
        let instances = export_filtered(&s).map_err(|e| match e {
            FilterError::PendingRemain(n) => ServiceError::PendingRemain(n),
            other => storage(other),
        })?;
        let mut out = String::new();
        for inst in instances {
            out.push_str(&serde_json::to_string(&inst).map_err(storage)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn stats(&self, job_id: &str, bins: usize) -> Result<JobStats, ServiceError> {
        if bins == 0 || bins > 1000 {
            return Err(ServiceError::Invalid("bins must lie in 1..=1000".into()));
        }
        let s = self.snapshot(job_id)?;
        let (edges, counts) = s.histogram(bins);
        Ok(JobStats {
            job_id: s.job_id.clone(),
            version: s.version,
            counts: s.counts(),
            threshold: s.threshold.filter(|t| t.is_finite()),
            delta: s.delta,
            histogram: Histogram { edges, counts },
        })
    }
}

#[derive(Clone)]
struct AppState {
    service: Arc<ReviewService>,
    token: Option<Arc<str>>,
}

#[derive(Debug, Deserialize)]
struct CandidateQuery {
    #[serde(default)]
    filter: CandidateFilter,
    #[serde(default)]
    page: usize,
    #[serde(default)]
    page_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct StatsQuery {
    #[serde(default)]
    bins: Option<usize>,
}

/// Runs blocking service work (locks and fsync) off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(storage)?
}

async fn jobs(State(app): State<AppState>) -> Result<Json<Vec<JobSummary>>, ServiceError> {
    Ok(Json(blocking(move || app.service.list_jobs()).await?))
}

async fn candidates(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<CandidateQuery>,
) -> Result<Json<CandidatePage>, ServiceError> {
    let size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    Ok(Json(blocking(move || app.service.list_candidates(&id, q.filter, q.page, size)).await?))
}

async fn threshold(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ThresholdRequest>,
) -> Result<Json<ThresholdResponse>, ServiceError> {
    Ok(Json(blocking(move || app.service.set_threshold(&id, &req)).await?))
}

async fn decision(
    State(app): State<AppState>,
    UrlPath((id, cid)): UrlPath<(String, String)>,
    Json(req): Json<DecisionRequest>,
) -> Result<Json<DecisionAck>, ServiceError> {
    Ok(Json(blocking(move || app.service.record_decision(&id, &cid, &req)).await?))
}

async fn export(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ServiceError> {
    let name = format!("attachment; filename=\"{id}-filtered.jsonl\"");
    let body = blocking(move || app.service.export(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson".to_string()), (header::CONTENT_DISPOSITION, name)], body)
        .into_response())
}

async fn stats(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StatsQuery>,
) -> Result<Json<JobStats>, ServiceError> {
    let bins = q.bins.unwrap_or(20);
    Ok(Json(blocking(move || app.service.stats(&id, bins)).await?))
}

async fn require_token(State(app): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let given = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_ref()) {
            return ServiceError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

/// The HTTP API, optionally guarded by a shared bearer token and serving
/// static UI assets from `ui_dir` at `/`.
pub fn router(service: Arc<ReviewService>, token: Option<String>, ui_dir: Option<PathBuf>) -> Router {
    let app = AppState { service, token: token.map(Arc::from) };
    let api = Router::new()
        .route("/jobs", get(jobs))
        .route("/jobs/{id}/candidates", get(candidates))
        .route("/jobs/{id}/threshold", put(threshold))
        .route("/jobs/{id}/candidates/{cid}/decision", put(decision))
        .route("/jobs/{id}/export", get(export))
        .route("/jobs/{id}/stats", get(stats))
        .route_layer(axum::middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub token: Option<String>,
    pub ui_dir: Option<PathBuf>,
}

/// Serves until interrupted. Prints `listening on http://<addr>` to stdout
/// once the socket is bound (port 0 picks a free port).
pub fn serve(opts: ServeOptions) -> Result<(), ServiceError> {
    let service = Arc::new(ReviewService::open(&opts.data_dir)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(storage)?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(opts.listen).await.map_err(storage)?;
        let addr = listener.local_addr().map_err(storage)?;
        {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "listening on http://{addr}");
            let _ = out.flush();
        }
        log::info!("serving {} jobs from {}", service.list_jobs()?.len(), opts.data_dir.display());
        axum::serve(listener, router(service, opts.token, opts.ui_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(storage)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::GeneratedCandidate;
    use crate::backends::EmbeddingVector;
    use crate::corpus::Label;
    use crate::filter::{rank_candidates, FilterConfig};

    fn seed_job(dir: &Path, id: &str, n: usize) -> FilterState {
        let cands: Vec<GeneratedCandidate> =
            (0..n).map(|i| GeneratedCandidate::new(id, i, 0, format!("candidate text {i}"))).collect();
        let embs: Vec<EmbeddingVector> =
            (0..n).map(|i| EmbeddingVector(vec![1.0, i as f64 / n as f64])).collect();
        let state = rank_candidates(id, Label::Relevant, cands, &embs, &[EmbeddingVector(vec![1.0, 0.0])], &FilterConfig::default())
            .unwrap();
        save_job_state(dir, &state).unwrap();
        state
    }

    #[test]
    fn workflow() {
        let dir = tempfile::tempdir().unwrap();
        seed_job(dir.path(), "job-a", 10);
        let svc = ReviewService::open(dir.path()).unwrap();
        assert_eq!(svc.list_jobs().unwrap().len(), 1);
        assert!(matches!(svc.list_candidates("nope", CandidateFilter::All, 0, 10), Err(ServiceError::UnknownJob(_))));

        let page = svc.list_candidates("job-a", CandidateFilter::All, 5, 10).unwrap();
        assert!(page.items.is_empty());
        assert_eq!(page.total, 10);

        let all = svc.list_candidates("job-a", CandidateFilter::All, 0, 100).unwrap();
        let d: Vec<f64> = all.items.iter().map(|c| c.distance.unwrap()).collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));

        let tau = d[5];
        let r = svc.set_threshold("job-a", &ThresholdRequest { tau, delta: Some(0.0), version: 0 }).unwrap();
        assert_eq!(r.version, 1);
        assert_eq!(r.counts.pending, 0);
        let stale = svc.set_threshold("job-a", &ThresholdRequest { tau, delta: Some(0.0), version: 0 });
        assert!(matches!(stale, Err(ServiceError::Conflict { current: 1, .. })));
        let neg = svc.set_threshold("job-a", &ThresholdRequest { tau: -1.0, delta: None, version: 1 });
        assert!(matches!(neg, Err(ServiceError::Invalid(_))));

        let r = svc.set_threshold("job-a", &ThresholdRequest { tau, delta: Some(d[8] - tau), version: 1 }).unwrap();
        let band = svc.list_candidates("job-a", CandidateFilter::Band, 0, 100).unwrap();
        let pending = svc.list_candidates("job-a", CandidateFilter::Pending, 0, 100).unwrap();
        assert_eq!(pending.total, r.counts.pending);
        assert!(band.total >= pending.total);
        assert!(matches!(svc.export("job-a"), Err(ServiceError::PendingRemain(n)) if n == r.counts.pending));

        let mut version = r.version;
        for c in &pending.items {
            let ack = svc
                .record_decision("job-a", &c.id, &DecisionRequest { decision: Decision::ExpertKeep, version })
                .unwrap();
            version = ack.version;
        }
        let first = &pending.items[0].id;
        let ack = svc.record_decision("job-a", first, &DecisionRequest { decision: Decision::ExpertDrop, version }).unwrap();
        assert_eq!(ack.decision, Decision::ExpertDrop);
        let stale = svc.record_decision("job-a", first, &DecisionRequest { decision: Decision::ExpertKeep, version });
        assert!(matches!(stale, Err(ServiceError::Conflict { .. })));
        assert!(matches!(
            svc.record_decision("job-a", "ghost", &DecisionRequest { decision: Decision::ExpertKeep, version: ack.version }),
            Err(ServiceError::UnknownCandidate(_))
        ));

        let exported = svc.export("job-a").unwrap();
        let stats = svc.stats("job-a", 5).unwrap();
        assert_eq!(exported.lines().count(), stats.counts.kept);

        // A fresh service over the same directory sees every acknowledged write.
        let again = ReviewService::open(dir.path()).unwrap();
        let s = again.stats("job-a", 5).unwrap();
        assert_eq!(s.version, ack.version);
        assert_eq!(s.counts, stats.counts);
    }

    #[test]
    fn zero_threshold_keeps_only_exact_matches() {
        let dir = tempfile::tempdir().unwrap();
        seed_job(dir.path(), "job-b", 4);
        let svc = ReviewService::open(dir.path()).unwrap();
        let r = svc.set_threshold("job-b", &ThresholdRequest { tau: 0.0, delta: Some(0.0), version: 0 }).unwrap();
        assert_eq!((r.counts.kept, r.counts.dropped), (1, 3));
        let out = svc.export("job-b").unwrap();
        assert_eq!(out.lines().count(), 1);
        assert!(out.contains("gen-job-b-00000"));
    }

    #[test]
    fn job_ids_cannot_escape_the_data_dir() {
        let dir = tempfile::tempdir().unwrap();
        let svc = ReviewService::open(dir.path()).unwrap();
        assert!(matches!(svc.stats("..", 5), Err(ServiceError::UnknownJob(_))));
        assert!(!valid_job_id("a/b"));
    }
}
