//! Staged fine-tuning: pretrained, masked modeling on an unlabeled domain
//! corpus, classification on the full training split, then the few-shot
//! split. Every stage records its checkpoint lineage.
//!
//! ```bash
//! cargo run --example multilevel_pipeline
//! ```

use cti_fewshot::backends::{MockMaskedLm, Vocabulary};
use cti_fewshot::corpus::{make_splits, SplitSpec, TEST};
use cti_fewshot::pipeline::{evaluate_model, run_pipeline, validate_plan, verify_lineage, PipelinePlan, RunOptions};
use cti_fewshot::synthetic::{synthetic_bundle, synthetic_corpus};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, synthetic_corpus(60, 1).join("\n"))?;

    let spec = SplitSpec { full_train: 200, full_dev: 60, test: 100, fewshot_train: 32, fewshot_dev: 32, seed: 1, stratify: true };
    let bundle = make_splits(&synthetic_bundle(360, 2), &spec)?;

    let mut plan = PipelinePlan::full(&format!("text:{}", corpus.display()));
    for s in &mut plan.stages {
        s.hyperparams.epochs = 3;
        s.hyperparams.batch_size = 16;
        s.hyperparams.learning_rate = 1e-2;
    }
    let plan = validate_plan(plan)?;

    let texts = bundle.instances.values().map(|i| i.text.as_str());
    let mut model = MockMaskedLm::new(Vocabulary::from_corpus(texts, 400, &["yes", "no"]), 7);
    let opts = RunOptions { experiment: "demo".into(), seed: 7, runs_dir: Some(dir.path().join("runs")) };
    let run = run_pipeline(&plan, &mut model, &bundle, None, &opts)?;
    verify_lineage(&run)?;

    for s in &run.stages {
        let m = s.metrics.as_ref();
        println!(
            "level {} {:<15} {:<28} steps {:>3}  loss {:>7.4} -> {:<7.4} {}",
            s.config.level,
            format!("{:?}", s.config.kind),
            s.output_checkpoint.as_deref().unwrap_or("-"),
            m.map_or(0, |m| m.steps),
            m.map_or(f64::NAN, |m| m.first_loss),
            m.map_or(f64::NAN, |m| m.final_epoch_loss),
            m.and_then(|m| m.eval.as_ref()).map(|e| format!("{} acc {:.3} f1 {:.3}", e.dataset, e.accuracy, e.f1)).unwrap_or_default(),
        );
    }
    let test: Vec<_> = bundle.split(TEST)?.into_iter().cloned().collect();
    let m = evaluate_model(&model, &plan, plan.final_objective(), TEST, &test)?;
    println!("\n{}: accuracy {:.3}, f1 {:.3} on {} posts", run.run_id, m.accuracy, m.f1, m.n);
    Ok(())
}
