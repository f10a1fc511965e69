use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, DatasetBundle, Label, FEWSHOT_DEV, FEWSHOT_TRAIN, FULL_DEV, FULL_TRAIN, TEST};

/// Requested split sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub full_train: usize,
    pub full_dev: usize,
    pub test: usize,
    pub fewshot_train: usize,
    pub fewshot_dev: usize,
    pub seed: u64,
    /// Draw the few-shot splits with equal per-class counts.
    pub stratify: bool,
}

impl SplitSpec {
    /// 1800 / 600 / 601 full splits and 32 / 32 few-shot splits.
    pub fn published(seed: u64) -> Self {
        Self {
            full_train: 1800,
            full_dev: 600,
            test: 601,
            fewshot_train: 32,
            fewshot_dev: 32,
            seed,
            stratify: true,
        }
    }
}

/// Split name → ordered ids; persisted next to the dataset file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub splits: BTreeMap<String, Vec<String>>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        crate::util::write_atomic(path, &json)?;
        Ok(())
    }
}

/// Assigns instances to the five standard splits.
///
/// Test, train and dev are consecutive slices of one seeded shuffle; the
/// few-shot splits are drawn from the front of the train and dev slices, per
/// class when `stratify` is set. A pure function of `(bundle, spec)`.
pub fn make_splits(bundle: &DatasetBundle, spec: &SplitSpec) -> Result<DatasetBundle, CorpusError> {
    let mut ids: Vec<(&String, Label)> = Vec::with_capacity(bundle.len());
    for (id, inst) in &bundle.instances {
        let label = inst.label.ok_or_else(|| CorpusError::Unlabeled(id.clone()))?;
        ids.push((id, label));
    }

    let needed = spec.full_train + spec.full_dev + spec.test;
    if needed > ids.len() {
        return Err(CorpusError::Infeasible(format!(
            "full_train + full_dev + test = {needed} exceeds {} labeled instances",
            ids.len()
        )));
    }
    if spec.fewshot_train > spec.full_train || spec.fewshot_dev > spec.full_dev {
        return Err(CorpusError::Infeasible(
            "few-shot splits cannot be larger than their full counterparts".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);

    let (test, rest) = ids.split_at(spec.test);
    let (train, rest) = rest.split_at(spec.full_train);
    let dev = &rest[..spec.full_dev];

    let fewshot_train = draw_fewshot(train, spec.fewshot_train, spec.stratify, FEWSHOT_TRAIN)?;
    let fewshot_dev = draw_fewshot(dev, spec.fewshot_dev, spec.stratify, FEWSHOT_DEV)?;

    let owned = |part: &[(&String, Label)]| part.iter().map(|(id, _)| (*id).clone()).collect::<Vec<_>>();
    let mut out = bundle.clone();
    out.splits = BTreeMap::from([
        (TEST.to_string(), owned(test)),
        (FULL_TRAIN.to_string(), owned(train)),
        (FULL_DEV.to_string(), owned(dev)),
        (FEWSHOT_TRAIN.to_string(), fewshot_train),
        (FEWSHOT_DEV.to_string(), fewshot_dev),
    ]);
    out.validate_splits()?;
    Ok(out)
}

fn draw_fewshot(
    pool: &[(&String, Label)],
    count: usize,
    stratify: bool,
    name: &str,
) -> Result<Vec<String>, CorpusError> {
    if !stratify {
        return Ok(pool[..count].iter().map(|(id, _)| (*id).clone()).collect());
    }
    // Equal share per class, remainder to classes in label order.
    let classes = Label::ALL.len();
    let mut quota: BTreeMap<Label, usize> = Label::ALL
        .iter()
        .enumerate()
        .map(|(i, l)| (*l, count / classes + usize::from(i < count % classes)))
        .collect();
    for (label, want) in &quota {
        let have = pool.iter().filter(|(_, l)| l == label).count();
        if have < *want {
            return Err(CorpusError::Infeasible(format!(
                "{name} needs {want} {label} instances but the pool has {have}"
            )));
        }
    }
    let mut picked = Vec::with_capacity(count);
    for (id, label) in pool {
        let left = quota.get_mut(label).expect("quota covers every label");
        if *left > 0 {
            *left -= 1;
            picked.push((*id).clone());
        }
    }
    Ok(picked)
}
