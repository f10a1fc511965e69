//! Metrics, multi-seed aggregation, report tables and the ablation matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    generate_candidates, AugmentError, AugmentMode, AugmentationJob, AugmentationJobSpec, END_TOKEN,
};
use crate::backends::{
    Embedder, MockEmbedder, MockGenerator, MockMaskedLm, TextGenerator, TrainableMaskedLm, Vocabulary,
};
use crate::corpus::{DatasetBundle, Label, LabeledInstance, FEWSHOT_TRAIN, TEST};
use crate::filter::{apply_threshold, embed_and_rank, export_filtered, suggest_threshold, FilterConfig, FilterError};
use crate::pipeline::{
    predict, run_pipeline, validate_plan, verify_lineage, Objective, PipelineError, PipelinePlan, PipelineRun,
    RunOptions, StageKind,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction ids differ from gold ids ({0})")]
    IdMismatch(String),
    #[error("no predictions")]
    Empty,
    #[error("aggregation needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("cannot parse cell {0:?}")]
    BadCell(String),
    #[error("experiment {experiment}: {message}")]
    Experiment { experiment: String, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn aligned<'a>(
    predictions: &'a BTreeMap<String, Label>,
    golds: &'a BTreeMap<String, Label>,
) -> Result<impl Iterator<Item = (Label, Label)> + 'a, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    if predictions.len() != golds.len() || predictions.keys().zip(golds.keys()).any(|(a, b)| a != b) {
        let missing = golds.keys().find(|k| !predictions.contains_key(*k));
        let extra = predictions.keys().find(|k| !golds.contains_key(*k));
        return Err(EvalError::IdMismatch(format!("first missing {missing:?}, first extra {extra:?}")));
    }
    Ok(predictions.values().zip(golds.values()).map(|(p, g)| (*p, *g)))
}

pub fn accuracy(predictions: &BTreeMap<String, Label>, golds: &BTreeMap<String, Label>) -> Result<f64, EvalError> {
    let pairs: Vec<_> = aligned(predictions, golds)?.collect();
    Ok(pairs.iter().filter(|(p, g)| p == g).count() as f64 / pairs.len() as f64)
}

/// F1 of the relevant class, `2PR / (P + R)`; 0 when `P + R = 0`.
pub fn binary_f1(predictions: &BTreeMap<String, Label>, golds: &BTreeMap<String, Label>) -> Result<f64, EvalError> {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, g) in aligned(predictions, golds)? {
        match (p, g) {
            (Label::Relevant, Label::Relevant) => tp += 1,
            (Label::Relevant, Label::Irrelevant) => fp += 1,
            (Label::Irrelevant, Label::Relevant) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub f1: f64,
    pub predictions: BTreeMap<String, Label>,
}

impl RunMetrics {
    pub fn compute(
        seed: u64,
        predictions: BTreeMap<String, Label>,
        golds: &BTreeMap<String, Label>,
    ) -> Result<Self, EvalError> {
        Ok(Self { seed, accuracy: accuracy(&predictions, golds)?, f1: binary_f1(&predictions, golds)?, predictions })
    }
}

/// Minimum, mean, population standard deviation and maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub min: f64,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl AggregateCell {
    pub fn scaled(self, factor: f64) -> Self {
        Self { min: self.min * factor, mean: self.mean * factor, std: self.std * factor, max: self.max * factor }
    }
}

/// Aggregates at least two values. The result does not depend on input order.
pub fn aggregate(values: &[f64]) -> Result<AggregateCell, EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFewRuns(values.len()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (min, max) = (v[0], v[v.len() - 1]);
    if min == max {
        return Ok(AggregateCell { min, mean: min, std: 0.0, max });
    }
    let n = v.len() as f64;
    let mean = (v.iter().sum::<f64>() / n).clamp(min, max);
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(AggregateCell { min, mean, std: var.sqrt(), max })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: AggregateCell,
    pub f1: AggregateCell,
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<MetricSummary, EvalError> {
    Ok(MetricSummary {
        accuracy: aggregate(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>())?,
        f1: aggregate(&runs.iter().map(|r| r.f1).collect::<Vec<_>>())?,
    })
}

/// `"MIN/ MEAN(STD) /MAX"` with two decimals.
pub fn format_cell(cell: &AggregateCell) -> String {
    format!("{:.2}/ {:.2}({:.2}) /{:.2}", cell.min, cell.mean, cell.std, cell.max)
}

/// Inverse of [`format_cell`] (up to the two-decimal rounding).
pub fn parse_cell(s: &str) -> Result<AggregateCell, EvalError> {
    let bad = || EvalError::BadCell(s.to_string());
    let (min, rest) = s.split_once("/ ").ok_or_else(bad)?;
    let (mean, rest) = rest.split_once('(').ok_or_else(bad)?;
    let (std, max) = rest.split_once(") /").ok_or_else(bad)?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
    Ok(AggregateCell { min: num(min)?, mean: num(mean)?, std: num(std)?, max: num(max)? })
}

pub const FULL: &str = "full";
pub const WITHOUT_AUGMENTATION: &str = "without_augmentation";
pub const WITHOUT_MULTILEVEL: &str = "without_multilevel";
pub const WITHOUT_ADAPET: &str = "without_adapet";

/// One runnable arm of an experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub name: String,
    pub plan: PipelinePlan,
    pub augment: bool,
}

/// The full plan and its three ablations: no augmented data, only levels 0
/// and 3, and a classification head instead of ADAPET at levels 2 and 3.
pub fn ablation_matrix(full: &PipelinePlan, with_augmentation: bool) -> Vec<Experiment> {
    let mut single = full.clone();
    let last = single.stages.iter().rposition(|s| s.kind == StageKind::Fewshot).unwrap_or(single.stages.len() - 1);
    single.stages = single
        .stages
        .iter()
        .enumerate()
        .filter(|(i, s)| s.level == 0 || *i == last)
        .map(|(_, s)| s.clone())
        .collect();

    let mut head = full.clone();
    for s in &mut head.stages {
        if s.level >= 2 && s.objective == Objective::Adapet {
            s.objective = Objective::Head;
        }
    }
    vec![
        Experiment { name: FULL.into(), plan: full.clone(), augment: with_augmentation },
        Experiment { name: WITHOUT_AUGMENTATION.into(), plan: full.clone(), augment: false },
        Experiment { name: WITHOUT_MULTILEVEL.into(), plan: single, augment: with_augmentation },
        Experiment { name: WITHOUT_ADAPET.into(), plan: head, augment: with_augmentation },
    ]
}

fn default_keep_fraction() -> f64 {
    0.8
}
fn default_source_split() -> String {
    FEWSHOT_TRAIN.to_string()
}

/// Augmentation with automatic filtering: each job draws its class's
/// instances from `source_split`, and the closest `keep_fraction` of the
/// candidates (by centroid distance) are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSetup {
    pub jobs: Vec<AugmentationJobSpec>,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "default_keep_fraction")]
    pub keep_fraction: f64,
    #[serde(default = "default_source_split")]
    pub source_split: String,
}

impl AugmentationSetup {
    /// One class-prompt job per label.
    pub fn both_classes(n_per_instance: usize) -> Self {
        let jobs = Label::ALL
            .iter()
            .map(|l| {
                let mut spec = AugmentationJobSpec::for_class(format!("aug-{l}"), *l);
                spec.n_per_instance = n_per_instance;
                spec
            })
            .collect();
        Self { jobs, filter: FilterConfig::default(), keep_fraction: default_keep_fraction(), source_split: default_source_split() }
    }
}

/// Model and service factories for experiments. Each run gets fresh
/// instances, so runs never share state.
pub trait Backends: Sync {
    fn generator(&self, job: &AugmentationJob) -> Result<Box<dyn TextGenerator>, EvalError>;
    fn embedder(&self) -> &dyn Embedder;
    fn masked_lm(&self, seed: u64) -> Box<dyn TrainableMaskedLm>;
}

/// Deterministic in-process backends.
pub struct MockBackends {
    vocab: Vocabulary,
    embedder: MockEmbedder,
}

impl MockBackends {
    pub const VOCAB_SIZE: usize = 400;

    /// Vocabulary built from the bundle's texts plus the verbalizer tokens.
    pub fn for_bundle(bundle: &DatasetBundle, plan: &PipelinePlan) -> Self {
        let extra: Vec<&str> = plan.verbalizer.iter().map(|(_, t)| t).collect();
        let vocab = Vocabulary::from_corpus(bundle.instances.values().map(|i| i.text.as_str()), Self::VOCAB_SIZE, &extra);
        Self { vocab, embedder: MockEmbedder::default() }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
}

pub(crate) fn mock_generator(job: &AugmentationJob) -> MockGenerator {
    let spec = job.spec();
    let separator = match spec.mode {
        AugmentMode::ClassPrompt => spec.priming_token.clone(),
        AugmentMode::IndexedShort | AugmentMode::LongContext => END_TOKEN.to_string(),
    };
    MockGenerator::new(job.sources().iter().map(|s| s.text.clone()), separator).with_seed(spec.seed)
}

impl Backends for MockBackends {
    fn generator(&self, job: &AugmentationJob) -> Result<Box<dyn TextGenerator>, EvalError> {
        Ok(Box::new(mock_generator(job)))
    }

    fn embedder(&self) -> &dyn Embedder {
        &self.embedder
    }

    fn masked_lm(&self, seed: u64) -> Box<dyn TrainableMaskedLm> {
        Box::new(MockMaskedLm::new(self.vocab.clone(), seed))
    }
}

/// Generates, ranks and automatically filters augmented instances for one seed.
pub fn augment_and_filter(
    setup: &AugmentationSetup,
    bundle: &DatasetBundle,
    backends: &dyn Backends,
    seed: u64,
) -> Result<Vec<LabeledInstance>, EvalError> {
    let pool = bundle.split(&setup.source_split).map_err(PipelineError::from)?;
    let mut out = Vec::new();
    for spec in &setup.jobs {
        let mut spec = spec.clone();
        spec.seed = seed;
        let sources: Vec<LabeledInstance> =
            pool.iter().filter(|i| i.label == Some(spec.class_label)).map(|i| (*i).clone()).collect();
        let job = AugmentationJob::new(spec, sources)?;
        let generator = backends.generator(&job)?;
        let outcome = generate_candidates(&job, generator.as_ref())?;
        for w in &outcome.warnings {
            log::warn!("{w}");
        }
        if outcome.candidates.is_empty() {
            continue;
        }
        let mut state = embed_and_rank(
            job.id(),
            job.spec().class_label,
            outcome.candidates,
            job.sources(),
            backends.embedder(),
            &setup.filter,
        )?;
        let tau = suggest_threshold(&state, setup.keep_fraction)?;
        apply_threshold(&mut state, tau, 0.0)?;
        out.extend(export_filtered(&state)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub run_id: String,
    pub accuracy: f64,
    pub f1: f64,
    pub augmented: usize,
}

/// Machine-readable experiment report (`report.json`). Metric cells are
/// percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub test_split: String,
    pub runs: Vec<RunSummary>,
    pub accuracy: AggregateCell,
    pub f1: AggregateCell,
    pub accuracy_cell: String,
    pub f1_cell: String,
}

impl ExperimentReport {
    pub fn table_row(&self) -> String {
        format!("| {} | {} | {} |", self.experiment, self.accuracy_cell, self.f1_cell)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub const TABLE_HEADER: &str = "| Experiment | Accuracy | F1 |\n|---|---|---|\n";

/// Markdown table over several experiment reports.
pub fn render_table(reports: &[ExperimentReport]) -> String {
    let mut s = TABLE_HEADER.to_string();
    for r in reports {
        s.push_str(&r.table_row());
        s.push('\n');
    }
    s
}

/// Per-run metric values, one row per (seed, metric), for external plotting.
pub fn distribution_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("experiment,seed,metric,value\n");
    for r in &report.runs {
        for (metric, v) in [("accuracy", r.accuracy), ("f1", r.f1)] {
            let _ = writeln!(s, "{},{},{metric},{v:.6}", report.experiment, r.seed);
        }
    }
    s
}

/// Everything an experiment run needs besides the backends.
#[derive(Debug, Clone)]
pub struct ExperimentSettings {
    pub seeds: Vec<u64>,
    pub augmentation: Option<AugmentationSetup>,
    /// Root under which `runs/<experiment>/` and `reports/<experiment>/` are written.
    pub out_dir: PathBuf,
    pub test_split: String,
}

impl ExperimentSettings {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { seeds: vec![1, 2, 3, 4, 5], augmentation: None, out_dir: out_dir.into(), test_split: TEST.to_string() }
    }
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub runs: Vec<PipelineRun>,
    pub report_dir: PathBuf,
}

fn one_run(
    exp: &Experiment,
    bundle: &DatasetBundle,
    backends: &dyn Backends,
    settings: &ExperimentSettings,
    seed: u64,
    golds: &BTreeMap<String, Label>,
    test: &[LabeledInstance],
) -> Result<(PipelineRun, RunSummary), EvalError> {
    let plan = validate_plan(exp.plan.clone())?;
    let augmented = match (&settings.augmentation, exp.augment) {
        (Some(setup), true) => augment_and_filter(setup, bundle, backends, seed)?,
        _ => Vec::new(),
    };
    let mut model = backends.masked_lm(seed);
    let opts = RunOptions {
        experiment: exp.name.clone(),
        seed,
        runs_dir: Some(settings.out_dir.join("runs").join(&exp.name)),
    };
    let run = run_pipeline(&plan, model.as_mut(), bundle, Some(&augmented), &opts)?;
    verify_lineage(&run)?;
    let predictions = predict(model.as_ref(), &plan, plan.final_objective(), test)?;
    let metrics = RunMetrics::compute(seed, predictions, golds)?;
    let summary =
        RunSummary { seed, run_id: run.run_id.clone(), accuracy: metrics.accuracy, f1: metrics.f1, augmented: augmented.len() };
    Ok((run, summary))
}

/// Runs an experiment once per seed (seeds in parallel, each with its own
/// model), scores the final model on the test split and writes
/// `report.json`, `table.md` and `distribution.csv`.
pub fn run_experiment(
    exp: &Experiment,
    bundle: &DatasetBundle,
    backends: &dyn Backends,
    settings: &ExperimentSettings,
) -> Result<ExperimentOutcome, EvalError> {
    validate_plan(exp.plan.clone())?;
    let test: Vec<LabeledInstance> =
        bundle.split(&settings.test_split).map_err(PipelineError::from)?.into_iter().cloned().collect();
    let golds = bundle.gold_labels(test.iter().map(|i| &i.id)).map_err(PipelineError::from)?;

    let results: Vec<Result<(PipelineRun, RunSummary), EvalError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = settings
            .seeds
            .iter()
            .map(|seed| {
                let (test, golds) = (&test, &golds);
                scope.spawn(move || one_run(exp, bundle, backends, settings, *seed, golds, test))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    Err(EvalError::Experiment { experiment: exp.name.clone(), message: "run panicked".into() })
                })
            })
            .collect()
    });
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for r in results {
        let (run, summary) = r?;
        runs.push(run);
        summaries.push(summary);
    }

    let acc = aggregate(&summaries.iter().map(|s| s.accuracy).collect::<Vec<_>>())?.scaled(100.0);
    let f1 = aggregate(&summaries.iter().map(|s| s.f1).collect::<Vec<_>>())?.scaled(100.0);
    let report = ExperimentReport {
        experiment: exp.name.clone(),
        test_split: settings.test_split.clone(),
        runs: summaries,
        accuracy: acc,
        f1,
        accuracy_cell: format_cell(&acc),
        f1_cell: format_cell(&f1),
    };
    let report_dir = settings.out_dir.join("reports").join(&exp.name);
    write_report(&report, &report_dir)?;
    Ok(ExperimentOutcome { report, runs, report_dir })
}

pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    crate::util::write_atomic(&dir.join("report.json"), &json)?;
    crate::util::write_atomic(&dir.join("table.md"), render_table(std::slice::from_ref(report)).as_bytes())?;
    crate::util::write_atomic(&dir.join("distribution.csv"), distribution_csv(report).as_bytes())?;
    Ok(())
}

pub struct AblationOutcome {
    pub completed: Vec<ExperimentOutcome>,
    pub failed: Vec<(String, EvalError)>,
}

impl AblationOutcome {
    pub fn success(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Runs every arm of [`ablation_matrix`]. A failing arm does not stop the
/// others; a combined `reports/ablation.md` covers the completed ones.
pub fn run_ablation(
    full: &PipelinePlan,
    bundle: &DatasetBundle,
    backends: &dyn Backends,
    settings: &ExperimentSettings,
) -> Result<AblationOutcome, EvalError> {
    validate_plan(full.clone())?;
    let mut completed = Vec::new();
    let mut failed = Vec::new();
    for exp in ablation_matrix(full, settings.augmentation.is_some()) {
        match run_experiment(&exp, bundle, backends, settings) {
            Ok(o) => completed.push(o),
            Err(e) => {
                log::error!("experiment {} failed: {e}", exp.name);
                failed.push((exp.name, e));
            }
        }
    }
    let reports: Vec<ExperimentReport> = completed.iter().map(|o| o.report.clone()).collect();
    let dir = settings.out_dir.join("reports");
    std::fs::create_dir_all(&dir)?;
    crate::util::write_atomic(&dir.join("ablation.md"), render_table(&reports).as_bytes())?;
    Ok(AblationOutcome { completed, failed })
}
