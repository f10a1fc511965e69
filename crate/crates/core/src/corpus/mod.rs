//! Labeled corpora: ingestion, preprocessing, annotation merging, agreement
//! statistics and train/dev/test split construction.

mod agreement;
mod links;
mod splits;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agreement::{cohen_kappa, majority_vote, merge_annotations, pairwise_kappa};
pub use links::{Hop, HttpResolver, LinkExpander, LinkExpansion, ResolveError, UrlResolver};
pub use splits::{make_splits, SplitManifest, SplitSpec};

pub const FULL_TRAIN: &str = "full_train";
pub const FULL_DEV: &str = "full_dev";
pub const FEWSHOT_TRAIN: &str = "fewshot_train";
pub const FEWSHOT_DEV: &str = "fewshot_dev";
pub const TEST: &str = "test";

/// Meta keys every generated instance must carry.
pub const META_GENERATION_JOB: &str = "generation_job";
pub const META_SOURCE_CLASS: &str = "source_class";
pub const META_EXPANDED_URLS: &str = "expanded_urls";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate instance id {id:?} (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("invalid instance {id:?}: {message}")]
    InvalidInstance { id: String, message: String },
    #[error("no annotations to merge")]
    NoAnnotations,
    #[error("annotation tie: {0}")]
    Tie(String),
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty label sequence")]
    EmptyInput,
    #[error("split {split:?} refers to unknown instance {id:?}")]
    DanglingSplitId { split: String, id: String },
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("instance {0:?} has no resolved label")]
    Unlabeled(String),
    #[error("infeasible split request: {0}")]
    Infeasible(String),
    #[error("split invariant violated: {0}")]
    SplitInvariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Binary relevance label. The derived order (`Irrelevant < Relevant`) matches
/// the lexicographic order of the names and is used for deterministic tie-breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Irrelevant,
    Relevant,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Irrelevant, Label::Relevant];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Irrelevant => "irrelevant",
            Label::Relevant => "relevant",
        }
    }

    /// Position of the label in [`Label::ALL`]; classification heads use this order.
    pub fn index(self) -> usize {
        match self {
            Label::Irrelevant => 0,
            Label::Relevant => 1,
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Irrelevant => Label::Relevant,
            Label::Relevant => Label::Irrelevant,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "relevant" => Ok(Label::Relevant),
            "irrelevant" => Ok(Label::Irrelevant),
            other => Err(format!("unknown label {other:?} (expected relevant|irrelevant)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Original,
    Generated,
}

/// One text item, its (optional) resolved label and the raw per-annotator labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledInstance {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub annotations: BTreeMap<String, Label>,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl LabeledInstance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Option<Label>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label,
            annotations: BTreeMap::new(),
            provenance: Provenance::Original,
            meta: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: &str| CorpusError::InvalidInstance {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.text.split_whitespace().next().is_none() {
            return Err(invalid("text is empty after whitespace normalization"));
        }
        if self.provenance == Provenance::Generated {
            for key in [META_GENERATION_JOB, META_SOURCE_CLASS] {
                if !self.meta.contains_key(key) {
                    return Err(invalid(&format!("generated instance lacks meta {key:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Instances keyed by id plus named, ordered id lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetBundle {
    pub instances: BTreeMap<String, LabeledInstance>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_instances(
        instances: impl IntoIterator<Item = LabeledInstance>,
    ) -> Result<Self, CorpusError> {
        let mut bundle = Self::new();
        for (i, inst) in instances.into_iter().enumerate() {
            bundle.insert_at(inst, i + 1)?;
        }
        Ok(bundle)
    }

    pub fn insert(&mut self, instance: LabeledInstance) -> Result<(), CorpusError> {
        let line = self.instances.len() + 1;
        self.insert_at(instance, line)
    }

    fn insert_at(&mut self, instance: LabeledInstance, line: usize) -> Result<(), CorpusError> {
        instance.validate()?;
        if self.instances.contains_key(&instance.id) {
            return Err(CorpusError::DuplicateId { id: instance.id, line });
        }
        self.instances.insert(instance.id.clone(), instance);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledInstance> {
        self.instances.get(id)
    }

    pub fn split_ids(&self, name: &str) -> Result<&[String], CorpusError> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| CorpusError::UnknownSplit(name.to_string()))
    }

    /// Instances of a split in split order.
    pub fn split(&self, name: &str) -> Result<Vec<&LabeledInstance>, CorpusError> {
        self.split_ids(name)?
            .iter()
            .map(|id| {
                self.instances.get(id).ok_or_else(|| CorpusError::DanglingSplitId {
                    split: name.to_string(),
                    id: id.clone(),
                })
            })
            .collect()
    }

    /// Checks the split invariants: ids resolve, full splits and test are pairwise
    /// disjoint, few-shot splits nest inside their full counterparts and avoid test.
    pub fn validate_splits(&self) -> Result<(), CorpusError> {
        use std::collections::BTreeSet;

        for (name, ids) in &self.splits {
            for id in ids {
                if !self.instances.contains_key(id) {
                    return Err(CorpusError::DanglingSplitId { split: name.clone(), id: id.clone() });
                }
            }
        }
        let set = |name: &str| -> BTreeSet<&str> {
            self.splits
                .get(name)
                .map(|ids| ids.iter().map(String::as_str).collect())
                .unwrap_or_default()
        };
        let (train, dev, test) = (set(FULL_TRAIN), set(FULL_DEV), set(TEST));
        let (fs_train, fs_dev) = (set(FEWSHOT_TRAIN), set(FEWSHOT_DEV));
        let violated = |msg: &str| Err(CorpusError::SplitInvariant(msg.to_string()));
        if !train.is_disjoint(&dev) || !train.is_disjoint(&test) || !dev.is_disjoint(&test) {
            return violated("full_train, full_dev and test must be pairwise disjoint");
        }
        if !fs_train.is_subset(&train) {
            return violated("fewshot_train must be a subset of full_train");
        }
        if !fs_dev.is_subset(&dev) {
            return violated("fewshot_dev must be a subset of full_dev");
        }
        if !fs_train.is_disjoint(&test) || !fs_dev.is_disjoint(&test) {
            return violated("few-shot splits must not intersect test");
        }
        Ok(())
    }

    /// One JSON object per line, LF endings, ordered by id.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        for inst in self.instances.values() {
            serde_json::to_writer(&mut out, inst)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        crate::util::write_atomic(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let file = std::fs::File::open(path)?;
        ingest(std::io::BufReader::new(file))
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest { splits: self.splits.clone() }
    }

    /// Loads a dataset file and, if given, its split manifest.
    pub fn load(dataset: &Path, manifest: Option<&Path>) -> Result<Self, CorpusError> {
        let mut bundle = Self::load_jsonl(dataset)?;
        if let Some(path) = manifest {
            bundle.splits = SplitManifest::load(path)?.splits;
            bundle.validate_splits()?;
        }
        Ok(bundle)
    }

    /// Resolved labels of the given ids.
    pub fn gold_labels<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a String>,
    ) -> Result<BTreeMap<String, Label>, CorpusError> {
        ids.into_iter()
            .map(|id| {
                let inst = self.get(id).ok_or_else(|| CorpusError::DanglingSplitId {
                    split: "<gold>".into(),
                    id: id.clone(),
                })?;
                inst.label
                    .map(|l| (id.clone(), l))
                    .ok_or_else(|| CorpusError::Unlabeled(id.clone()))
            })
            .collect()
    }
}

/// Reads line-delimited records into a bundle with no splits.
///
/// Blank lines are skipped. Line numbers in errors are 1-based.
pub fn ingest<R: BufRead>(reader: R) -> Result<DatasetBundle, CorpusError> {
    let mut bundle = DatasetBundle::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: LabeledInstance = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
        inst.validate().map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        bundle.insert_at(inst, line_no)?;
    }
    Ok(bundle)
}

/// Joins a long document's title and body behind the `xxtitle` / `xxbodytext`
/// marker tokens.
pub fn preprocess_long_text(title: &str, body: &str) -> String {
    format!("xxtitle {title} xxbodytext {body}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, text: &str) -> String {
        format!(r#"{{"id":"{id}","text":"{text}","label":"relevant"}}"#)
    }

    #[test]
    fn ingest_three_lines() {
        let input = [record("a", "x"), record("b", "y"), record("c", "z")].join("\n");
        let bundle = ingest(input.as_bytes()).unwrap();
        assert_eq!(bundle.len(), 3);
        assert!(bundle.splits.is_empty());
    }

    #[test]
    fn ingest_reports_line_of_missing_text() {
        let input = format!("{}\n{}\n", record("a", "x"), r#"{"id":"b"}"#);
        let err = ingest(input.as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn ingest_rejects_duplicate_ids() {
        let input = format!("{}\n{}\n", record("t1", "x"), record("t1", "y"));
        match ingest(input.as_bytes()).unwrap_err() {
            CorpusError::DuplicateId { id, .. } => assert_eq!(id, "t1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ingest_rejects_whitespace_only_text() {
        let input = r#"{"id":"a","text":"  \t "}"#;
        assert!(matches!(ingest(input.as_bytes()), Err(CorpusError::Malformed { line: 1, .. })));
    }

    #[test]
    fn generated_instances_need_job_meta() {
        let mut inst = LabeledInstance::new("g", "text", Some(Label::Relevant));
        inst.provenance = Provenance::Generated;
        assert!(inst.validate().is_err());
        inst.meta.insert(META_GENERATION_JOB.into(), "job".into());
        inst.meta.insert(META_SOURCE_CLASS.into(), "relevant".into());
        inst.validate().unwrap();
    }

    #[test]
    fn long_text_markers() {
        assert_eq!(preprocess_long_text("T", "B"), "xxtitle T xxbodytext B");
        assert_eq!(preprocess_long_text("", "B"), "xxtitle  xxbodytext B");
        assert_eq!(preprocess_long_text("A A", "B B"), "xxtitle A A xxbodytext B B");
    }

    #[test]
    fn label_order_matches_names() {
        assert!(Label::Irrelevant < Label::Relevant);
        assert!(Label::Irrelevant.as_str() < Label::Relevant.as_str());
        assert_eq!("relevant".parse::<Label>().unwrap(), Label::Relevant);
    }
}
