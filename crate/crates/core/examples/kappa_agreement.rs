//! Intercoder agreement and label resolution for a small annotated sample.
//!
//! ```bash
//! cargo run --example kappa_agreement
//! ```

use cti_fewshot::corpus::{cohen_kappa, merge_annotations, pairwise_kappa, DatasetBundle, Label, LabeledInstance};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    use Label::{Irrelevant as N, Relevant as R};
    let votes = [
        ("t1", "CISA warns of exploited Exchange flaw", [R, R, R]),
        ("t2", "Best pancakes in town this weekend", [N, N, N]),
        ("t3", "New phishing kit targets bank customers", [R, R, N]),
        ("t4", "Our team won the regional final", [N, N, N]),
        ("t5", "Patch Tuesday fixes 3 zero-days", [R, N, R]),
        ("t6", "Security conference tickets on sale", [N, R, N]),
    ];

    let mut bundle = DatasetBundle::new();
    for (id, text, labels) in votes {
        let mut inst = LabeledInstance::new(id, text, None);
        for (coder, label) in ["C1", "C2", "C3"].iter().zip(labels) {
            inst.annotations.insert(coder.to_string(), label);
        }
        bundle.insert(inst)?;
    }

    for (a, b) in [("C1", "C2"), ("C2", "C3"), ("C1", "C3")] {
        let (k, n) = pairwise_kappa(&bundle, a, b)?;
        println!("kappa({a}, {b}) = {k:.4} over {n} posts");
    }

    let ties = merge_annotations(&mut bundle);
    println!("\nmajority labels (ties: {ties:?}):");
    for inst in bundle.instances.values() {
        println!("  {} {:<10} {}", inst.id, inst.label.map(|l| l.to_string()).unwrap_or_default(), inst.text);
    }

    // Works on any ordered label type.
    let k = cohen_kappa(&["a", "b", "a", "c"], &["a", "b", "c", "c"])?;
    println!("\nthree-way labels: {k:.4}");
    Ok(())
}
