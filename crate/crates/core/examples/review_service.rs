//! The expert review workflow: first through `ReviewService` directly, then
//! (with `serve`) over HTTP until Ctrl-C.
//!
//! ```bash
//! cargo run --example review_service
//! cargo run --example review_service -- serve
//! curl -s localhost:8080/jobs/demo/candidates?filter=band
//! ```

use cti_fewshot::augment::{Decision, GeneratedCandidate};
use cti_fewshot::backends::MockEmbedder;
use cti_fewshot::corpus::{Label, LabeledInstance};
use cti_fewshot::filter::{embed_and_rank, FilterConfig};
use cti_fewshot::review_service::{
    save_job_state, serve, CandidateFilter, DecisionRequest, ReviewService, ServeOptions, ServiceError,
    ThresholdRequest,
};
use cti_fewshot::synthetic::synthetic_bundle;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = tempfile::tempdir()?;
    let bundle = synthetic_bundle(80, 4);
    let posts: Vec<&LabeledInstance> = bundle.instances.values().collect();
    let originals: Vec<LabeledInstance> = posts[..20].iter().map(|p| (*p).clone()).collect();
    let candidates = posts[20..].iter().enumerate().map(|(i, p)| GeneratedCandidate::new("demo", i, 0, p.text.clone())).collect();
    let state = embed_and_rank("demo", Label::Relevant, candidates, &originals, &MockEmbedder::default(), &FilterConfig::default())?;
    save_job_state(data.path(), &state)?;

    let svc = ReviewService::open(data.path())?;
    let page = svc.list_candidates("demo", CandidateFilter::All, 0, 1000)?;
    let tau = page.items[page.items.len() / 2].distance.unwrap();
    let t = svc.set_threshold("demo", &ThresholdRequest { tau, delta: None, version: page.version })?;
    println!("tau {tau:.4} delta {:.4} -> {:?}", t.delta, t.counts);

    let band = svc.list_candidates("demo", CandidateFilter::Pending, 0, 5)?;
    let mut version = band.version;
    for c in &band.items {
        let ack = svc.record_decision("demo", &c.id, &DecisionRequest { decision: Decision::ExpertKeep, version })?;
        println!("kept {} (v{}) {}", c.id, ack.version, c.text);
        version = ack.version;
    }
    match svc.record_decision("demo", &band.items[0].id, &DecisionRequest { decision: Decision::ExpertDrop, version: 0 }) {
        Err(ServiceError::Conflict { current, .. }) => println!("stale write rejected, current version {current}"),
        other => println!("unexpected: {other:?}"),
    }
    match svc.export("demo") {
        Err(e) => println!("export: {e}"),
        Ok(file) => println!("export: {} lines", file.lines().count()),
    }

    if std::env::args().nth(1).as_deref() == Some("serve") {
        serve(ServeOptions {
            listen: "127.0.0.1:8080".parse()?,
            data_dir: data.path().to_path_buf(),
            token: None,
            ui_dir: None,
        })?;
    }
    Ok(())
}
