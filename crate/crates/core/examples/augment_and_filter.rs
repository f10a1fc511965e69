//! Generate same-class posts from a class prompt, rank them by distance to
//! the class centroid, set a threshold with a review band, settle the band by
//! hand and export what survives.
//!
//! ```bash
//! cargo run --example augment_and_filter
//! ```

use cti_fewshot::augment::{generate_candidates, prime_class_corpus, AugmentationJob, AugmentationJobSpec, Decision};
use cti_fewshot::backends::{MockEmbedder, MockGenerator};
use cti_fewshot::corpus::{Label, LabeledInstance};
use cti_fewshot::filter::{default_review_delta, embed_and_rank, export_filtered, suggest_threshold, FilterConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sources: Vec<LabeledInstance> = [
        "Attackers exploit unpatched VPN servers, patch now",
        "Ransomware gang leaks hospital data, advisory released",
        "CVE-2023-1234 exploited in the wild against routers",
        "Phishing campaign abuses cloud accounts #infosec",
        "Botnet scans for exposed admin panels",
        "Zero-day in mail gateway under active attack",
    ]
    .iter()
    .enumerate()
    .map(|(i, t)| LabeledInstance::new(format!("src-{i}"), *t, Some(Label::Relevant)))
    .collect();

    let texts: Vec<String> = sources.iter().map(|s| s.text.clone()).collect();
    println!("class prompt:\n{}\n", prime_class_corpus(&texts[..2].iter().map(String::as_str).collect::<Vec<_>>(), "cybersecurity ->")?);

    let mut spec = AugmentationJobSpec::for_class("demo-relevant", Label::Relevant);
    spec.n_per_instance = 3;
    spec.seed = 11;
    let job = AugmentationJob::new(spec, sources)?;
    let generator = MockGenerator::new(texts.iter().map(String::as_str), "cybersecurity ->").with_seed(11);
    let outcome = generate_candidates(&job, &generator)?;
    println!("{} candidates from {} calls (quota {})", outcome.candidates.len(), outcome.manifest.calls.len(), job.quota());

    let mut state = embed_and_rank(
        job.id(),
        Label::Relevant,
        outcome.candidates,
        job.sources(),
        &MockEmbedder::default(),
        &FilterConfig::default(),
    )?;
    let tau = suggest_threshold(&state, 0.7)?;
    let delta = default_review_delta(&state, tau)?;
    let counts = state.set_threshold(tau, delta, state.version)?;
    println!("tau {tau:.4}, delta {delta:.4}: {counts:?}\n");

    for c in &state.candidates {
        let near = c.nearest.as_ref().unwrap();
        println!(
            "{:.4} {:<10?} {:<55} ~ {} (cos {:.3}, edit {})",
            c.distance.unwrap(),
            c.decision,
            c.text,
            near.original_id,
            near.cosine_similarity,
            near.levenshtein_distance
        );
    }

    // The expert keeps band candidates that share words with their nearest original.
    let pending: Vec<(String, bool)> = state
        .candidates
        .iter()
        .filter(|c| c.decision == Decision::Pending)
        .map(|c| (c.id.clone(), c.nearest.as_ref().unwrap().cosine_similarity > 0.5))
        .collect();
    for (id, keep) in pending {
        let d = if keep { Decision::ExpertKeep } else { Decision::ExpertDrop };
        state.record_decision(&id, d, state.version)?;
    }

    let kept = export_filtered(&state)?;
    println!("\nexported {} of {} candidates (state version {})", kept.len(), state.candidates.len(), state.version);
    for inst in kept.iter().take(3) {
        println!("  {} {}", inst.id, inst.text);
    }
    Ok(())
}
