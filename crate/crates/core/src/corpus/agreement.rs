use std::collections::BTreeMap;

use super::{CorpusError, DatasetBundle, Label};

/// Label with the strictly greatest count. Ties are errors so that the caller
/// can route the instance to adjudication.
pub fn majority_vote(annotations: &BTreeMap<String, Label>) -> Result<Label, CorpusError> {
    if annotations.is_empty() {
        return Err(CorpusError::NoAnnotations);
    }
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for label in annotations.values() {
        *counts.entry(*label).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let winners: Vec<Label> = counts.iter().filter(|(_, c)| **c == best).map(|(l, _)| *l).collect();
    match winners.as_slice() {
        [single] => Ok(*single),
        _ => Err(CorpusError::Tie(
            annotations
                .iter()
                .map(|(who, l)| format!("{who}={l}"))
                .collect::<Vec<_>>()
                .join(", "),
        )),
    }
}

/// Fills `label` from the annotations of every unlabeled instance.
///
/// Returns the ids whose annotations tied; those stay unlabeled.
pub fn merge_annotations(bundle: &mut DatasetBundle) -> Vec<String> {
    let mut ties = Vec::new();
    for inst in bundle.instances.values_mut() {
        if inst.label.is_some() || inst.annotations.is_empty() {
            continue;
        }
        match majority_vote(&inst.annotations) {
            Ok(label) => inst.label = Some(label),
            Err(_) => ties.push(inst.id.clone()),
        }
    }
    ties
}

/// Cohen's kappa for two coders over the same items.
///
/// Chance agreement comes from each coder's marginal label frequencies. The
/// computation runs on integer counts so the result is exactly symmetric.
pub fn cohen_kappa<T: Ord>(labels_a: &[T], labels_b: &[T]) -> Result<f64, CorpusError> {
    if labels_a.len() != labels_b.len() {
        return Err(CorpusError::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    if labels_a.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let n = labels_a.len() as u128;
    let agree = labels_a.iter().zip(labels_b).filter(|(a, b)| a == b).count() as u128;

    let mut marginals: BTreeMap<&T, (u128, u128)> = BTreeMap::new();
    for a in labels_a {
        marginals.entry(a).or_default().0 += 1;
    }
    for b in labels_b {
        marginals.entry(b).or_default().1 += 1;
    }
    let chance: u128 = marginals.values().map(|(ca, cb)| ca * cb).sum();

    // kappa = (p_o - p_e) / (1 - p_e), scaled by n^2.
    let denom = n * n - chance;
    if denom == 0 {
        // p_e = 1 only when both coders used one and the same label throughout.
        return Ok(1.0);
    }
    let numer = (n * agree) as f64 - chance as f64;
    Ok(numer / denom as f64)
}

/// Kappa between two annotators over the instances both of them labeled.
pub fn pairwise_kappa(
    bundle: &DatasetBundle,
    coder_a: &str,
    coder_b: &str,
) -> Result<(f64, usize), CorpusError> {
    let (a, b): (Vec<Label>, Vec<Label>) = bundle
        .instances
        .values()
        .filter_map(|inst| Some((*inst.annotations.get(coder_a)?, *inst.annotations.get(coder_b)?)))
        .unzip();
    let n = a.len();
    Ok((cohen_kappa(&a, &b)?, n))
}
