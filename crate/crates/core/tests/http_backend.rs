//! The completion client against an in-process stub endpoint.

use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use cti_fewshot::augment::{generate_candidates, AugmentationJob, AugmentationJobSpec};
use cti_fewshot::backends::{
    generate_with_retry, BackendError, FinishReason, GenerationParams, GenerationRequest, HttpCompletionBackend,
    RetryPolicy, TextGenerator,
};
use cti_fewshot::corpus::{Label, LabeledInstance};

#[derive(Default)]
struct Stub {
    /// Status codes to return before answering normally.
    failures: Vec<u16>,
    seen: Vec<(Option<String>, Option<String>, Value)>,
}

async fn complete(State(stub): State<Arc<Mutex<Stub>>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let mut s = stub.lock().unwrap();
    let header = |k: &str| headers.get(k).and_then(|v| v.to_str().ok()).map(str::to_string);
    s.seen.push((header("idempotency-key"), header("authorization"), body.clone()));
    if !s.failures.is_empty() {
        let code = s.failures.remove(0);
        return (StatusCode::from_u16(code).unwrap(), Json(json!({"error": "stub"})));
    }
    let prompt = body["prompt"].as_str().unwrap_or_default();
    let (text, finish) = if prompt.contains("truncate") {
        ("partial outp".to_string(), "length")
    } else {
        // Echo the prompt, as some completion services do.
        (format!("{prompt} first generated post\ncybersecurity -> second generated post\nSTOP ignored tail"), "stop")
    };
    (StatusCode::OK, Json(json!({"choices": [{"text": text, "finish_reason": finish}]})))
}

fn start(stub: Arc<Mutex<Stub>>) -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let app = Router::new().route("/v1/completions", post(complete)).with_state(stub);
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{addr}/v1/completions")
}

fn request(prompt: &str) -> GenerationRequest {
    GenerationRequest {
        id: "job-call0001".into(),
        prompt: prompt.into(),
        params: GenerationParams { stop_sequences: vec!["STOP".into()], seed: Some(9), ..GenerationParams::default() },
    }
}

#[test]
fn retries_transient_failures_with_a_stable_request_id() {
    let stub = Arc::new(Mutex::new(Stub { failures: vec![503, 429], ..Stub::default() }));
    let url = start(stub.clone());
    let backend = HttpCompletionBackend::new(url, Some("secret".into()), "test-model").unwrap();
    let (completion, log) = generate_with_retry(&backend, &request("cybersecurity ->"), &RetryPolicy::immediate(3)).unwrap();
    assert_eq!(completion.text, " first generated post\ncybersecurity -> second generated post\n");
    assert_eq!(completion.finish, FinishReason::Stop);
    assert_eq!(log.len(), 3);
    assert_eq!(log[2].outcome, "ok");

    let s = stub.lock().unwrap();
    assert_eq!(s.seen.len(), 3);
    for (key, auth, body) in &s.seen {
        assert_eq!(key.as_deref(), Some("job-call0001"));
        assert_eq!(auth.as_deref(), Some("Bearer secret"));
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["seed"], 9);
        assert_eq!(body["stop"], json!(["STOP"]));
    }
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Arc::new(Mutex::new(Stub { failures: vec![400], ..Stub::default() }));
    let backend = HttpCompletionBackend::new(start(stub.clone()), None, "m").unwrap();
    let err = generate_with_retry(&backend, &request("x"), &RetryPolicy::immediate(5)).unwrap_err();
    match err {
        BackendError::Unavailable { attempts, .. } => assert_eq!(attempts.len(), 1),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(stub.lock().unwrap().seen[0].1, None);
}

#[test]
fn length_finish_is_reported() {
    let stub = Arc::new(Mutex::new(Stub::default()));
    let backend = HttpCompletionBackend::new(start(stub), None, "m").unwrap();
    let c = backend.generate(&request("truncate me")).unwrap();
    assert_eq!((c.text.as_str(), c.finish), ("partial outp", FinishReason::Length));
}

#[test]
fn augmentation_job_over_http() {
    let stub = Arc::new(Mutex::new(Stub::default()));
    let backend = HttpCompletionBackend::new(start(stub.clone()), None, "m").unwrap();
    let sources = vec![
        LabeledInstance::new("a", "attackers exploit vpn servers", Some(Label::Relevant)),
        LabeledInstance::new("b", "ransomware hits hospital networks", Some(Label::Relevant)),
    ];
    let mut spec = AugmentationJobSpec::for_class("http-job", Label::Relevant);
    spec.n_per_instance = 2;
    spec.retry = RetryPolicy::immediate(2);
    spec.generation.stop_sequences = vec!["STOP".into()];
    let job = AugmentationJob::new(spec, sources).unwrap();
    let outcome = generate_candidates(&job, &backend).unwrap();
    assert!(outcome.quota_met());
    assert!(outcome.candidates.iter().all(|c| !c.text.contains("cybersecurity ->") && !c.text.contains("STOP")));
    assert!(outcome.candidates.iter().any(|c| c.text == "first generated post"));
    let keys: std::collections::BTreeSet<_> = stub.lock().unwrap().seen.iter().map(|s| s.0.clone().unwrap()).collect();
    assert_eq!(keys.len(), outcome.manifest.calls.len());
}
