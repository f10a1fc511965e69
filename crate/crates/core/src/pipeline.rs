//! Multi-level fine-tuning: a plan of stages executed in order on one
//! trainable masked language model, each stage starting from the checkpoint
//! the previous one produced.
//!
//! Levels: 0 pretrained model, 1 domain masked modeling, 2 related
//! classification task, 3 target few-shot task. Stages may be skipped, but
//! levels must increase.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    normalize_token, BackendError, DecoupledExample, MaskedModelingExample, StepSettings, TrainBatch,
    TrainableMaskedLm,
};
use crate::corpus::{CorpusError, DatasetBundle, Label, LabeledInstance};
use crate::evalharness::{accuracy, binary_f1};
use crate::fewshot::{
    apply_pattern, encode_instance, label_conditioning_batch, predict_label, sample_mask_positions, AdapetWeights,
    ClozeEncoding, FewShotError, Pattern, Verbalizer, DEFAULT_MASK_RATE, MASK_MARKER,
};
use crate::util::sha256_hex;

/// Longest document (in whitespace tokens) used for masked modeling.
pub const MAX_MLM_TOKENS: usize = 128;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("stage {level}: {message}")]
    Data { level: u8, message: String },
    #[error("stage {level} failed: {message}")]
    StageFailed { level: u8, message: String, record: Option<PathBuf> },
    #[error("lineage broken: {0}")]
    Lineage(String),
    #[error("augmented instance {0:?} collides with an existing instance")]
    AugmentedCollision(String),
    #[error("augmented instance {0:?} would leak into an evaluation set")]
    Leakage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Pretrained,
    MaskedModeling,
    Classification,
    Fewshot,
}

impl StageKind {
    pub fn level(self) -> u8 {
        match self {
            StageKind::Pretrained => 0,
            StageKind::MaskedModeling => 1,
            StageKind::Classification => 2,
            StageKind::Fewshot => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    None,
    /// Cross-entropy on a two-way classification head.
    Head,
    /// Decoupled label loss plus label conditioning on cloze patterns.
    Adapet,
}

/// Where a stage's data comes from: `split:<name>` of the bundle, a labeled
/// `jsonl:<path>` dataset, or a plain `text:<path>` corpus (one document per
/// line). A bare name is read as a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DatasetRef {
    Split(String),
    Jsonl(PathBuf),
    Text(PathBuf),
}

impl FromStr for DatasetRef {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PipelineError::InvalidPlan(format!("bad dataset reference {s:?}"));
        let r = if let Some(name) = s.strip_prefix("split:") {
            DatasetRef::Split(name.to_string())
        } else if let Some(p) = s.strip_prefix("jsonl:") {
            DatasetRef::Jsonl(p.into())
        } else if let Some(p) = s.strip_prefix("text:") {
            DatasetRef::Text(p.into())
        } else if !s.contains(':') {
            DatasetRef::Split(s.to_string())
        } else {
            return Err(bad());
        };
        match &r {
            DatasetRef::Split(n) if n.is_empty() => Err(bad()),
            DatasetRef::Jsonl(p) | DatasetRef::Text(p) if p.as_os_str().is_empty() => Err(bad()),
            _ => Ok(r),
        }
    }
}

impl TryFrom<String> for DatasetRef {
    type Error = PipelineError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DatasetRef> for String {
    fn from(r: DatasetRef) -> String {
        r.to_string()
    }
}

impl fmt::Display for DatasetRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetRef::Split(n) => write!(f, "split:{n}"),
            DatasetRef::Jsonl(p) => write!(f, "jsonl:{}", p.display()),
            DatasetRef::Text(p) => write!(f, "text:{}", p.display()),
        }
    }
}

impl DatasetRef {
    /// Resolves relative file paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        if let DatasetRef::Jsonl(p) | DatasetRef::Text(p) = self {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Overrides the run seed for this stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        default_hyperparams()
    }
}

/// 5 epochs, batch size 48, learning rate 1e-5, 100 warmup steps, warmup
/// ratio 0.06, weight decay 0.001.
pub fn default_hyperparams() -> Hyperparams {
    Hyperparams {
        epochs: 5,
        batch_size: 48,
        learning_rate: 1e-5,
        warmup_steps: 100,
        warmup_ratio: 0.06,
        weight_decay: 0.001,
        seed: None,
    }
}

impl Hyperparams {
    fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(format!("warmup_ratio must lie in [0, 1], got {}", self.warmup_ratio));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupBound {
    Steps,
    Ratio,
}

/// Effective warmup length: the smaller of `warmup_steps` and
/// `ceil(warmup_ratio * total_steps)`, with the bound that was active.
pub fn effective_warmup(hp: &Hyperparams, total_steps: usize) -> (usize, WarmupBound) {
    let by_ratio = (hp.warmup_ratio * total_steps as f64).ceil() as usize;
    if hp.warmup_steps <= by_ratio {
        (hp.warmup_steps, WarmupBound::Steps)
    } else {
        (by_ratio, WarmupBound::Ratio)
    }
}

/// Linear warmup to `base`, then linear decay towards zero.
pub fn learning_rate_at(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base * (total - step) as f64 / (total - warmup) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub level: u8,
    pub kind: StageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetRef>,
    /// Labeled set scored after the stage finishes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<DatasetRef>,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub hyperparams: Hyperparams,
}

impl StageConfig {
    pub fn new(kind: StageKind, dataset: Option<&str>, objective: Objective) -> Self {
        Self {
            level: kind.level(),
            kind,
            dataset: dataset.map(|d| d.parse().expect("valid dataset reference")),
            eval: None,
            objective,
            hyperparams: default_hyperparams(),
        }
    }

    pub fn with_eval(mut self, eval: &str) -> Self {
        self.eval = Some(eval.parse().expect("valid dataset reference"));
        self
    }
}

fn default_mask_rate() -> f64 {
    DEFAULT_MASK_RATE
}

/// A declarative plan: ordered stages plus the cloze setup shared by every
/// ADAPET stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelinePlan {
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub pattern: Pattern,
    #[serde(default)]
    pub verbalizer: Verbalizer,
    #[serde(default)]
    pub adapet_weights: AdapetWeights,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
}

impl PipelinePlan {
    pub fn new(stages: Vec<StageConfig>) -> Self {
        Self {
            stages,
            pattern: Pattern::default(),
            verbalizer: Verbalizer::default(),
            adapet_weights: AdapetWeights::default(),
            mask_rate: DEFAULT_MASK_RATE,
        }
    }

    /// Pretrained → masked modeling on `corpus` → classification on
    /// `full_train` → ADAPET on `fewshot_train`.
    pub fn full(corpus: &str) -> Self {
        Self::new(vec![
            StageConfig::new(StageKind::Pretrained, None, Objective::None),
            StageConfig::new(StageKind::MaskedModeling, Some(corpus), Objective::None),
            StageConfig::new(StageKind::Classification, Some("split:full_train"), Objective::Adapet)
                .with_eval("split:full_dev"),
            StageConfig::new(StageKind::Fewshot, Some("split:fewshot_train"), Objective::Adapet)
                .with_eval("split:fewshot_dev"),
        ])
    }

    /// The last stage that trains a classifier (its objective decides how
    /// predictions are made).
    pub fn final_objective(&self) -> Objective {
        self.stages.iter().rev().map(|s| s.objective).find(|o| *o != Objective::None).unwrap_or(Objective::None)
    }
}

/// A plan that passed [`validate_plan`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedPlan(PipelinePlan);

impl ValidatedPlan {
    pub fn plan(&self) -> &PipelinePlan {
        &self.0
    }

    pub fn into_inner(self) -> PipelinePlan {
        self.0
    }
}

impl std::ops::Deref for ValidatedPlan {
    type Target = PipelinePlan;
    fn deref(&self) -> &PipelinePlan {
        &self.0
    }
}

pub fn validate_plan(plan: PipelinePlan) -> Result<ValidatedPlan, PipelineError> {
    let bad = |m: String| Err(PipelineError::InvalidPlan(m));
    let Some(first) = plan.stages.first() else {
        return bad("plan has no stages".into());
    };
    if first.level != 0 || first.kind != StageKind::Pretrained {
        return bad("the first stage must be the level-0 pretrained model".into());
    }
    for pair in plan.stages.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.level == b.level {
            return bad(format!("two stages at level {}", a.level));
        }
        if b.level < a.level {
            return bad(format!("levels must increase: {} after {}", b.level, a.level));
        }
    }
    for s in &plan.stages {
        let lvl = s.level;
        if s.kind.level() != lvl {
            return bad(format!("stage kind {:?} belongs at level {}, not {lvl}", s.kind, s.kind.level()));
        }
        match s.kind {
            StageKind::Pretrained => {
                if s.objective != Objective::None || s.dataset.is_some() {
                    return bad("the pretrained stage takes no objective and no dataset".into());
                }
            }
            StageKind::MaskedModeling => {
                if s.objective != Objective::None {
                    return bad("masked modeling uses its own objective; set objective = none".into());
                }
            }
            StageKind::Classification | StageKind::Fewshot => {
                if s.objective == Objective::None {
                    return bad(format!("stage at level {lvl} needs objective head or adapet"));
                }
            }
        }
        if s.kind != StageKind::Pretrained && s.dataset.is_none() {
            return bad(format!("stage at level {lvl} needs a dataset"));
        }
        if s.kind != StageKind::MaskedModeling && matches!(s.dataset, Some(DatasetRef::Text(_))) {
            return bad(format!("stage at level {lvl} needs labeled data, not a text corpus"));
        }
        if s.kind != StageKind::Pretrained {
            s.hyperparams.validate().map_err(|m| PipelineError::InvalidPlan(format!("level {lvl}: {m}")))?;
        }
    }
    if !(plan.mask_rate > 0.0 && plan.mask_rate < 1.0) {
        return bad(format!("mask_rate must lie in (0, 1), got {}", plan.mask_rate));
    }
    Ok(ValidatedPlan(plan))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub dataset: String,
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub train_examples: usize,
    pub augmented_examples: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub warmup_bound: WarmupBound,
    pub first_loss: f64,
    pub final_epoch_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub config: StageConfig,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_checkpoint: Option<String>,
    /// Digest of the augmented ids appended to this stage's training set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<StageMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Persisted record of one pipeline execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub run_id: String,
    pub experiment: String,
    pub seed: u64,
    pub plan: PipelinePlan,
    pub stages: Vec<StageResult>,
    pub augmented_ids: Vec<String>,
    pub completed: bool,
}

impl PipelineRun {
    pub fn final_checkpoint(&self) -> Option<&str> {
        self.stages.iter().rev().find_map(|s| s.output_checkpoint.as_deref())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, PipelineError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.run_id));
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        crate::util::write_atomic(&path, &json)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Content address of a stage output: hash of parent id, stage config, seed
/// and (when present) the augmented-data digest.
pub fn checkpoint_id(parent: Option<&str>, config: &StageConfig, seed: u64, augmented: Option<&str>) -> String {
    let config_json = serde_json::to_string(config).expect("stage config serializes");
    let mut material = format!("parent={}\nconfig={config_json}\nseed={seed}", parent.unwrap_or(""));
    if let Some(a) = augmented {
        material.push_str(&format!("\naugmented={a}"));
    }
    format!("ckpt-{}", &sha256_hex(material.as_bytes())[..24])
}

/// Checks that every stage starts from its predecessor's output, levels
/// increase, and every completed stage's checkpoint id matches its content
/// address.
pub fn verify_lineage(run: &PipelineRun) -> Result<(), PipelineError> {
    let mut prev: Option<&StageResult> = None;
    for s in &run.stages {
        if s.status == StageStatus::Skipped {
            continue;
        }
        if let Some(p) = prev {
            if s.config.level <= p.config.level {
                return Err(PipelineError::Lineage(format!("level {} follows {}", s.config.level, p.config.level)));
            }
            if s.input_checkpoint.as_deref() != p.output_checkpoint.as_deref() {
                return Err(PipelineError::Lineage(format!(
                    "stage {} starts from {:?}, previous stage produced {:?}",
                    s.config.level, s.input_checkpoint, p.output_checkpoint
                )));
            }
        } else if s.input_checkpoint.is_some() {
            return Err(PipelineError::Lineage("first stage has a parent".into()));
        }
        if s.status == StageStatus::Completed {
            let expected = checkpoint_id(
                s.input_checkpoint.as_deref(),
                &s.config,
                stage_seed(&s.config, run.seed),
                s.augmented_digest.as_deref(),
            );
            if s.output_checkpoint.as_deref() != Some(expected.as_str()) {
                return Err(PipelineError::Lineage(format!("stage {} checkpoint id does not verify", s.config.level)));
            }
        } else if s.output_checkpoint.is_some() {
            return Err(PipelineError::Lineage(format!("failed stage {} has an output", s.config.level)));
        }
        prev = Some(s);
    }
    Ok(())
}

fn stage_seed(config: &StageConfig, run_seed: u64) -> u64 {
    config.hyperparams.seed.unwrap_or(run_seed)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub experiment: String,
    pub seed: u64,
    /// Directory for `run-<hash>.json`; nothing is written when unset.
    pub runs_dir: Option<PathBuf>,
}

fn load_dataset(
    bundle: &DatasetBundle,
    r: &DatasetRef,
    level: u8,
) -> Result<Vec<LabeledInstance>, PipelineError> {
    let data_err = |message: String| PipelineError::Data { level, message };
    match r {
        DatasetRef::Split(name) => Ok(bundle
            .split(name)
            .map_err(|e| data_err(e.to_string()))?
            .into_iter()
            .cloned()
            .collect()),
        DatasetRef::Jsonl(path) => Ok(DatasetBundle::load_jsonl(path)
            .map_err(|e| data_err(format!("{}: {e}", path.display())))?
            .instances
            .into_values()
            .collect()),
        DatasetRef::Text(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
            Ok(text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| LabeledInstance::new(format!("doc-{}", i + 1), l.trim(), None))
                .collect())
        }
    }
}

struct PreparedStage {
    train: Vec<LabeledInstance>,
    eval: Option<(String, Vec<LabeledInstance>)>,
    augmented: usize,
    augmented_digest: Option<String>,
}

/// Resolves and checks every stage's data (and the augmented set) without
/// training anything.
pub fn check_plan_data(
    plan: &ValidatedPlan,
    bundle: &DatasetBundle,
    augmented: &[LabeledInstance],
) -> Result<(), PipelineError> {
    prepare_stages(plan, bundle, augmented).map(|_| ())
}

fn prepare_stages(
    plan: &PipelinePlan,
    bundle: &DatasetBundle,
    augmented: &[LabeledInstance],
) -> Result<Vec<PreparedStage>, PipelineError> {
    for a in augmented {
        if bundle.get(&a.id).is_some() {
            return Err(PipelineError::AugmentedCollision(a.id.clone()));
        }
        if a.label.is_none() {
            return Err(PipelineError::Corpus(CorpusError::Unlabeled(a.id.clone())));
        }
    }
    let aug_ids: BTreeSet<&str> = augmented.iter().map(|a| a.id.as_str()).collect();
    let digest = (!augmented.is_empty()).then(|| {
        let joined: Vec<&str> = aug_ids.iter().copied().collect();
        sha256_hex(joined.join("\n").as_bytes())[..16].to_string()
    });

    let mut out = Vec::with_capacity(plan.stages.len());
    for s in &plan.stages {
        let level = s.level;
        let mut train = match &s.dataset {
            Some(r) => load_dataset(bundle, r, level)?,
            None => Vec::new(),
        };
        if s.kind == StageKind::Classification || s.kind == StageKind::Fewshot {
            if let Some(u) = train.iter().find(|i| i.label.is_none()) {
                return Err(PipelineError::Data { level, message: format!("instance {:?} is unlabeled", u.id) });
            }
            if train.is_empty() {
                return Err(PipelineError::Data { level, message: "training set is empty".into() });
            }
        }
        let mut n_aug = 0;
        let mut stage_digest = None;
        if s.kind == StageKind::Fewshot && !augmented.is_empty() {
            train.extend(augmented.iter().cloned());
            n_aug = augmented.len();
            stage_digest = digest.clone();
        }
        let eval = match &s.eval {
            Some(r) => {
                let set = load_dataset(bundle, r, level)?;
                if let Some(leak) = set.iter().find(|i| aug_ids.contains(i.id.as_str())) {
                    return Err(PipelineError::Leakage(leak.id.clone()));
                }
                if let Some(u) = set.iter().find(|i| i.label.is_none()) {
                    return Err(PipelineError::Data { level, message: format!("eval instance {:?} is unlabeled", u.id) });
                }
                Some((r.to_string(), set))
            }
            None => None,
        };
        out.push(PreparedStage { train, eval, augmented: n_aug, augmented_digest: stage_digest });
    }
    Ok(out)
}

/// Masked-modeling example: `mask_rate` of the (truncated) document's tokens
/// replaced by the mask marker, targets the normalized originals.
pub fn masked_modeling_example(text: &str, mask_rate: f64, seed: u64) -> Result<Option<MaskedModelingExample>, PipelineError> {
    let tokens: Vec<&str> = text.split_whitespace().take(MAX_MLM_TOKENS).collect();
    let positions = sample_mask_positions(tokens.len(), mask_rate, seed)?;
    if positions.is_empty() {
        return Ok(None);
    }
    let mut targets = Vec::with_capacity(positions.len());
    let mut rewritten = Vec::with_capacity(tokens.len());
    let mut next = positions.iter().peekable();
    for (i, tok) in tokens.iter().enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
            rewritten.push(MASK_MARKER);
            targets.push(normalize_token(tok));
        } else {
            rewritten.push(tok);
        }
    }
    Ok(Some(MaskedModelingExample { cloze: ClozeEncoding::from_text(rewritten.join(" ")), targets }))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [a, b] {
        h = (h ^ x).wrapping_mul(0x0100_0000_01b3).rotate_left(29);
    }
    h
}

fn build_batch(
    plan: &PipelinePlan,
    stage: &StageConfig,
    items: &[&LabeledInstance],
    seed: u64,
) -> Result<TrainBatch, PipelineError> {
    match (stage.kind, stage.objective) {
        (StageKind::MaskedModeling, _) => {
            let mut examples = Vec::new();
            for (i, inst) in items.iter().enumerate() {
                if let Some(ex) = masked_modeling_example(&inst.text, plan.mask_rate, mix(seed, i as u64, 1))? {
                    examples.push(ex);
                }
            }
            Ok(TrainBatch::MaskedModeling(examples))
        }
        (_, Objective::Head) => Ok(TrainBatch::Head(
            items.iter().map(|i| (i.text.clone(), i.label.expect("checked labeled"))).collect(),
        )),
        (_, Objective::Adapet) => {
            let mut decoupled = Vec::with_capacity(items.len());
            let mut conditioning = Vec::with_capacity(items.len() * 2);
            for (i, inst) in items.iter().enumerate() {
                let gold = inst.label.expect("checked labeled");
                decoupled.push(DecoupledExample {
                    cloze: encode_instance(&plan.pattern, inst)?,
                    correct_token: plan.verbalizer.token(gold).to_string(),
                });
                conditioning.extend(label_conditioning_batch(
                    inst,
                    &plan.pattern,
                    &plan.verbalizer,
                    plan.mask_rate,
                    mix(seed, i as u64, 2),
                )?);
            }
            Ok(TrainBatch::Adapet { decoupled, conditioning, weights: plan.adapet_weights })
        }
        (_, Objective::None) => unreachable!("validated plan"),
    }
}

/// Labels for `instances` under the given objective: head argmax, or the
/// verbalizer token with the highest mask probability.
pub fn predict(
    model: &dyn TrainableMaskedLm,
    plan: &PipelinePlan,
    objective: Objective,
    instances: &[LabeledInstance],
) -> Result<BTreeMap<String, Label>, PipelineError> {
    let mut out = BTreeMap::new();
    for inst in instances {
        let label = match objective {
            Objective::Head => {
                let z = model.head_logits(&inst.text)?;
                if z[Label::Relevant.index()] > z[Label::Irrelevant.index()] {
                    Label::Relevant
                } else {
                    Label::Irrelevant
                }
            }
            Objective::Adapet | Objective::None => {
                let cloze = apply_pattern(&plan.pattern, &inst.text)?;
                predict_label(&model.mask_distribution(&cloze)?, &plan.verbalizer)?
            }
        };
        out.insert(inst.id.clone(), label);
    }
    Ok(out)
}

/// Accuracy and F1 of `model` on a labeled set.
pub fn evaluate_model(
    model: &dyn TrainableMaskedLm,
    plan: &PipelinePlan,
    objective: Objective,
    name: &str,
    instances: &[LabeledInstance],
) -> Result<EvalMetrics, PipelineError> {
    let predictions = predict(model, plan, objective, instances)?;
    let gold: BTreeMap<String, Label> =
        instances.iter().map(|i| (i.id.clone(), i.label.expect("labeled eval set"))).collect();
    let to_err = |e: crate::evalharness::EvalError| PipelineError::Data { level: 0, message: e.to_string() };
    Ok(EvalMetrics {
        dataset: name.to_string(),
        n: instances.len(),
        accuracy: accuracy(&predictions, &gold).map_err(to_err)?,
        f1: binary_f1(&predictions, &gold).map_err(to_err)?,
    })
}

fn train_stage(
    model: &mut dyn TrainableMaskedLm,
    plan: &PipelinePlan,
    stage: &StageConfig,
    prepared: &PreparedStage,
    seed: u64,
) -> Result<StageMetrics, PipelineError> {
    let hp = &stage.hyperparams;
    let n = prepared.train.len();
    let per_epoch = n.div_ceil(hp.batch_size);
    let total = per_epoch * hp.epochs;
    let (warmup, bound) = effective_warmup(hp, total);
    log::info!(
        "level {}: {} examples, {total} steps, warmup {warmup} ({} bound active)",
        stage.level,
        n,
        match bound {
            WarmupBound::Steps => "warmup_steps",
            WarmupBound::Ratio => "warmup_ratio",
        }
    );

    let mut order: Vec<usize> = (0..n).collect();
    let mut first_loss = f64::NAN;
    let mut epoch_loss = 0.0;
    let mut step = 0;
    for epoch in 0..hp.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::from(stage.level), epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        epoch_loss = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let items: Vec<&LabeledInstance> = chunk.iter().map(|i| &prepared.train[*i]).collect();
            let batch = build_batch(plan, stage, &items, mix(seed, epoch as u64, step as u64))?;
            if batch.is_empty() {
                step += 1;
                continue;
            }
            let settings = StepSettings {
                learning_rate: learning_rate_at(hp.learning_rate, step, warmup, total),
                weight_decay: hp.weight_decay,
            };
            let loss = model.loss_and_update(&batch, &settings)?;
            if first_loss.is_nan() {
                first_loss = loss;
            }
            epoch_loss += loss * chunk.len() as f64 / n as f64;
            step += 1;
        }
    }
    let eval = match &prepared.eval {
        Some((name, set)) if stage.objective != Objective::None => {
            Some(evaluate_model(model, plan, stage.objective, name, set)?)
        }
        _ => None,
    };
    Ok(StageMetrics {
        train_examples: n,
        augmented_examples: prepared.augmented,
        steps: total,
        warmup_steps: warmup,
        warmup_bound: bound,
        first_loss,
        final_epoch_loss: epoch_loss,
        eval,
    })
}

fn run_id(plan: &PipelinePlan, opts: &RunOptions, augmented: &[LabeledInstance]) -> String {
    let mut ids: Vec<&str> = augmented.iter().map(|a| a.id.as_str()).collect();
    ids.sort_unstable();
    let material = format!(
        "experiment={}\nseed={}\nplan={}\naugmented={}",
        opts.experiment,
        opts.seed,
        serde_json::to_string(plan).expect("plan serializes"),
        ids.join(",")
    );
    format!("run-{}", &sha256_hex(material.as_bytes())[..16])
}

/// Executes the plan stage by stage. Data references are resolved before
/// any training starts. When a stage fails, the run record (with that stage
/// marked failed and later stages skipped) is still persisted.
pub fn run_pipeline(
    plan: &ValidatedPlan,
    model: &mut dyn TrainableMaskedLm,
    bundle: &DatasetBundle,
    augmented: Option<&[LabeledInstance]>,
    opts: &RunOptions,
) -> Result<PipelineRun, PipelineError> {
    let augmented = augmented.unwrap_or(&[]);
    let prepared = prepare_stages(plan, bundle, augmented)?;
    let mut run = PipelineRun {
        run_id: run_id(plan, opts, augmented),
        experiment: opts.experiment.clone(),
        seed: opts.seed,
        plan: plan.plan().clone(),
        stages: Vec::with_capacity(prepared.len()),
        augmented_ids: augmented.iter().map(|a| a.id.clone()).collect(),
        completed: false,
    };

    let mut parent: Option<String> = None;
    let mut failure: Option<(u8, String)> = None;
    for (config, prep) in plan.stages.iter().zip(&prepared) {
        let mut result = StageResult {
            config: config.clone(),
            status: StageStatus::Skipped,
            input_checkpoint: parent.clone(),
            output_checkpoint: None,
            augmented_digest: prep.augmented_digest.clone(),
            metrics: None,
            error: None,
        };
        if failure.is_some() {
            run.stages.push(result);
            continue;
        }
        let seed = stage_seed(config, opts.seed);
        let outcome = (|| -> Result<(String, Option<StageMetrics>), PipelineError> {
            if let Some(p) = &parent {
                model.restore(p)?;
            }
            let metrics = match config.kind {
                StageKind::Pretrained => None,
                _ => Some(train_stage(model, plan, config, prep, seed)?),
            };
            let id = checkpoint_id(parent.as_deref(), config, seed, prep.augmented_digest.as_deref());
            model.snapshot(&id)?;
            Ok((id, metrics))
        })();
        match outcome {
            Ok((id, metrics)) => {
                result.status = StageStatus::Completed;
                result.output_checkpoint = Some(id.clone());
                result.metrics = metrics;
                parent = Some(id);
            }
            Err(e) => {
                result.status = StageStatus::Failed;
                result.error = Some(e.to_string());
                failure = Some((config.level, e.to_string()));
            }
        }
        run.stages.push(result);
    }
    run.completed = failure.is_none();
    let record = match &opts.runs_dir {
        Some(dir) => Some(run.save(dir)?),
        None => None,
    };
    if let Some((level, message)) = failure {
        return Err(PipelineError::StageFailed { level, message, record });
    }
    Ok(run)
}
