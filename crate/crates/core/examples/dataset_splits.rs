//! Standard splits over a synthetic labeled corpus, saved as a manifest and
//! reloaded next to the dataset file.
//!
//! ```bash
//! cargo run --example dataset_splits
//! ```

use cti_fewshot::corpus::{make_splits, DatasetBundle, Label, SplitSpec, FEWSHOT_TRAIN};
use cti_fewshot::synthetic::synthetic_bundle;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bundle = synthetic_bundle(3001, 7);
    let split = make_splits(&bundle, &SplitSpec::published(42))?;
    for (name, ids) in &split.splits {
        let relevant = ids.iter().filter(|id| split.get(id).and_then(|i| i.label) == Some(Label::Relevant)).count();
        println!("{name:<14} {:>5} instances, {relevant:>4} relevant", ids.len());
    }

    let dir = tempfile::tempdir()?;
    let (data, manifest) = (dir.path().join("dataset.jsonl"), dir.path().join("splits.json"));
    let mut unsplit = split.clone();
    unsplit.splits.clear();
    unsplit.save_jsonl(&data)?;
    split.manifest().save(&manifest)?;

    let reloaded = DatasetBundle::load(&data, Some(&manifest))?;
    assert_eq!(reloaded.splits, split.splits);
    println!("\nfirst few-shot training posts:");
    for inst in reloaded.split(FEWSHOT_TRAIN)?.iter().take(4) {
        println!("  [{}] {}", inst.label.unwrap(), inst.text);
    }
    Ok(())
}
