//! The full configuration against its three ablations, five seeds each,
//! summarized as "min/ mean(std) /max" cells.
//!
//! ```bash
//! cargo run --release --example ablation_report
//! ```

use cti_fewshot::corpus::{make_splits, SplitSpec};
use cti_fewshot::evalharness::{render_table, run_ablation, AugmentationSetup, ExperimentSettings, MockBackends};
use cti_fewshot::pipeline::PipelinePlan;
use cti_fewshot::synthetic::{synthetic_bundle, synthetic_corpus};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, synthetic_corpus(40, 3).join("\n"))?;
    let spec = SplitSpec { full_train: 150, full_dev: 50, test: 80, fewshot_train: 32, fewshot_dev: 32, seed: 5, stratify: true };
    let bundle = make_splits(&synthetic_bundle(280, 9), &spec)?;

    let mut plan = PipelinePlan::full(&format!("text:{}", corpus.display()));
    for s in &mut plan.stages {
        s.hyperparams.epochs = 2;
        s.hyperparams.batch_size = 16;
        s.hyperparams.learning_rate = 1e-2;
    }

    let mut settings = ExperimentSettings::new(dir.path());
    settings.augmentation = Some(AugmentationSetup::both_classes(1));
    let backends = MockBackends::for_bundle(&bundle, &plan);
    let outcome = run_ablation(&plan, &bundle, &backends, &settings)?;

    let reports: Vec<_> = outcome.completed.iter().map(|o| o.report.clone()).collect();
    print!("{}", render_table(&reports));
    println!();
    for r in &reports {
        let augmented: Vec<usize> = r.runs.iter().map(|s| s.augmented).collect();
        println!("{:<22} augmented per seed {augmented:?}", r.experiment);
    }
    println!("\nartifacts under {}", dir.path().join("reports").display());
    Ok(())
}
