//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.
//!
//! Files under `--data-dir`:
//!
//! ```text
//! dataset.jsonl               labeled instances (ingest)
//! splits.json                 split manifest (split)
//! jobs/<job>/candidates.jsonl generated candidates (augment)
//! jobs/<job>/manifest.json    generation audit record (augment)
//! jobs/<job>/state.json       ranked filter state (filter rank, review-serve)
//! jobs/<job>/filtered.jsonl   kept instances (filter export)
//! runs/<experiment>/*.json    pipeline run records (train, evaluate, ablate)
//! reports/<experiment>/       report.json, table.md, distribution.csv
//! reports/summary.md          combined table (report)
//! ```

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::augment::{
    generate_candidates, read_candidates, write_candidates, AugmentError, AugmentMode, AugmentationJob,
    AugmentationJobSpec, JobManifest,
};
use crate::backends::{BackendError, HttpCompletionBackend, TextGenerator};
use crate::config::{load_config, ConfigError, ExperimentConfig};
use crate::corpus::{HttpResolver, LinkExpander};
use crate::corpus::{
    cohen_kappa, ingest, make_splits, merge_annotations, pairwise_kappa, CorpusError, DatasetBundle, Label,
    SplitSpec, FEWSHOT_TRAIN, FULL_DEV, FULL_TRAIN, TEST,
};
use crate::evalharness::{
    ablation_matrix, augment_and_filter, render_table, run_ablation, run_experiment, Backends, EvalError,
    Experiment, ExperimentReport, ExperimentSettings, MockBackends,
};
use crate::filter::{
    default_review_delta, embed_and_rank, export_filtered, suggest_threshold, FilterConfig, FilterError,
    FilterState,
};
use crate::pipeline::{
    check_plan_data, evaluate_model, run_pipeline, validate_plan, PipelineError, PipelinePlan, RunOptions,
};
use crate::review_service::{self, load_job_state, save_job_state, ServiceError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Deterministic in-process generator, embedder and language model.
    Mock,
    /// Completion endpoint from the environment; embedder and language model stay in-process.
    Http,
}

#[derive(Debug, Parser)]
#[command(name = "cti-fewshot", version, about = "Few-shot relevance classification for cyber threat intelligence")]
pub struct Cli {
    /// Experiment config (TOML). A file with top-level `stages` is a bare plan.
    #[arg(long, global = true, visible_alias = "plan")]
    pub config: Option<PathBuf>,
    /// Dotted-key override applied after the config file is read (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = review_service::ENV_DATA_DIR, default_value = "data")]
    pub data_dir: PathBuf,
    /// Validate inputs and report what would happen without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[arg(long, global = true, value_enum, default_value_t = BackendKind::Mock)]
    pub backend: BackendKind,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read line-delimited instances, resolve labels from annotations, write dataset.jsonl.
    Ingest(IngestArgs),
    /// Assign instances to the five standard splits and write splits.json.
    Split(SplitArgs),
    /// Cohen's kappa between two coders.
    Kappa(KappaArgs),
    /// Generate candidate instances for one class.
    Augment(AugmentArgs),
    /// Rank, threshold and export generated candidates.
    Filter {
        #[command(subcommand)]
        action: FilterAction,
    },
    /// Serve the review API (and optionally the review UI).
    ReviewServe(ServeArgs),
    /// Run the configured pipeline once.
    Train(TrainArgs),
    /// Train once per seed and score on the test split.
    Evaluate(EvaluateArgs),
    /// Run the full configuration and its three ablations.
    Ablate(EvaluateArgs),
    /// Combine every experiment report into one table.
    Report,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Line-delimited JSON instances.
    pub input: PathBuf,
    /// Resolve shortened links over the network (cached in link_cache.json).
    #[arg(long)]
    pub expand_links: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 1800)]
    pub full_train: usize,
    #[arg(long, default_value_t = 600)]
    pub full_dev: usize,
    #[arg(long, default_value_t = 601)]
    pub test: usize,
    #[arg(long, default_value_t = 32)]
    pub fewshot_train: usize,
    #[arg(long, default_value_t = 32)]
    pub fewshot_dev: usize,
    /// Draw the few-shot splits without balancing classes.
    #[arg(long)]
    pub no_stratify: bool,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("files").multiple(true).requires_all(["a", "b"]))]
pub struct KappaArgs {
    /// Labels of the first coder: one label per line, or `id label` lines.
    #[arg(long, group = "files")]
    pub a: Option<PathBuf>,
    #[arg(long, group = "files")]
    pub b: Option<PathBuf>,
    /// Instead of label files, compare two annotators recorded in dataset.jsonl.
    #[arg(long, num_args = 2, value_names = ["CODER_A", "CODER_B"], conflicts_with = "files")]
    pub coders: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Job from the config's augmentation section.
    #[arg(long, conflicts_with = "class")]
    pub job: Option<String>,
    /// Ad-hoc class-prompt job for this label.
    #[arg(long)]
    pub class: Option<Label>,
    #[arg(long)]
    pub mode: Option<CliAugmentMode>,
    /// Instances to request per source instance.
    #[arg(long)]
    pub n: Option<usize>,
    /// Split the source instances are drawn from.
    #[arg(long, default_value = FEWSHOT_TRAIN)]
    pub source_split: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CliAugmentMode {
    ClassPrompt,
    IndexedShort,
    LongContext,
}

impl From<CliAugmentMode> for AugmentMode {
    fn from(m: CliAugmentMode) -> Self {
        match m {
            CliAugmentMode::ClassPrompt => AugmentMode::ClassPrompt,
            CliAugmentMode::IndexedShort => AugmentMode::IndexedShort,
            CliAugmentMode::LongContext => AugmentMode::LongContext,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum FilterAction {
    /// Embed a job's candidates and rank them by distance to the class centroid.
    Rank {
        #[arg(long)]
        job: String,
        /// Replace a state that already has threshold or expert history.
        #[arg(long)]
        force: bool,
    },
    /// Suggest τ keeping the closest fraction of candidates, with a default review band.
    SuggestThreshold {
        #[arg(long)]
        job: String,
        #[arg(long, default_value_t = 0.8)]
        keep_fraction: f64,
    },
    /// Set τ (and δ) and recompute automatic decisions.
    Apply {
        #[arg(long)]
        job: String,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Write kept instances to jobs/<job>/filtered.jsonl (or --output).
    Export {
        #[arg(long)]
        job: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = review_service::ENV_LISTEN, default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    /// Static files of the review UI, served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Shared bearer token required on every API request.
    #[arg(long, env = review_service::ENV_TOKEN, hide_env_values = true)]
    pub token: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Expert-filtered instances (from `filter export`) added to few-shot stages.
    #[arg(long)]
    pub augmented: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Split scored after training.
    #[arg(long, default_value = TEST)]
    pub test_split: String,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("CTI_LOG").try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("\nFor more information, try '--help'.");
            }
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(cli, a),
        Command::Split(a) => cmd_split(cli, a),
        Command::Kappa(a) => cmd_kappa(cli, a),
        Command::Augment(a) => cmd_augment(cli, a),
        Command::Filter { action } => cmd_filter(cli, action),
        Command::ReviewServe(a) => cmd_serve(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a, false),
        Command::Ablate(a) => cmd_evaluate(cli, a, true),
        Command::Report => cmd_report(cli),
    }
}

fn out(line: impl std::fmt::Display) {
    let mut o = std::io::stdout().lock();
    let _ = writeln!(o, "{line}");
}

fn dataset_path(cli: &Cli) -> PathBuf {
    cli.data_dir.join("dataset.jsonl")
}

fn manifest_path(cli: &Cli) -> PathBuf {
    cli.data_dir.join("splits.json")
}

fn load_bundle(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Result<DatasetBundle, CliError> {
    let dataset = cfg.and_then(|c| c.dataset.clone()).unwrap_or_else(|| dataset_path(cli));
    let manifest = cfg.and_then(|c| c.manifest.clone()).or_else(|| Some(manifest_path(cli)).filter(|p| p.is_file()));
    if !dataset.is_file() {
        return Err(CliError::Failed(format!("{} not found (run `ingest` first)", dataset.display())));
    }
    Ok(DatasetBundle::load(&dataset, manifest.as_deref())?)
}

fn config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli.config.as_deref().ok_or_else(|| CliError::Usage("this command needs --config <FILE>".into()))?;
    Ok(load_config(path, &cli.overrides)?)
}

fn optional_config(cli: &Cli) -> Result<Option<ExperimentConfig>, CliError> {
    match &cli.config {
        Some(_) => config(cli).map(Some),
        None if !cli.overrides.is_empty() => Err(CliError::Usage("--set needs --config".into())),
        None => Ok(None),
    }
}

/// The seeds a multi-run command uses: the config's list, or as many
/// consecutive seeds starting at `--seed`.
fn seeds(cli: &Cli, cfg: &ExperimentConfig) -> Vec<u64> {
    match cli.seed {
        Some(base) => (0..cfg.seeds.len() as u64).map(|i| base + i).collect(),
        None => cfg.seeds.clone(),
    }
}

struct HttpBackends {
    local: MockBackends,
}

impl Backends for HttpBackends {
    fn generator(&self, _job: &AugmentationJob) -> Result<Box<dyn TextGenerator>, EvalError> {
        let backend = HttpCompletionBackend::from_env()
            .map_err(|e| EvalError::Experiment { experiment: "augmentation".into(), message: e.to_string() })?;
        Ok(Box::new(backend))
    }

    fn embedder(&self) -> &dyn crate::backends::Embedder {
        self.local.embedder()
    }

    fn masked_lm(&self, seed: u64) -> Box<dyn crate::backends::TrainableMaskedLm> {
        self.local.masked_lm(seed)
    }
}

fn backends(cli: &Cli, bundle: &DatasetBundle, plan: &PipelinePlan) -> Box<dyn Backends> {
    let local = MockBackends::for_bundle(bundle, plan);
    match cli.backend {
        BackendKind::Mock => Box::new(local),
        BackendKind::Http => Box::new(HttpBackends { local }),
    }
}

fn cmd_ingest(cli: &Cli, a: &IngestArgs) -> Result<(), CliError> {
    let file = std::fs::File::open(&a.input).map_err(|e| CliError::Failed(format!("{}: {e}", a.input.display())))?;
    let mut bundle = ingest(std::io::BufReader::new(file))?;
    let ties = merge_annotations(&mut bundle);
    for id in &ties {
        log::warn!("instance {id:?}: annotations tie, label left unresolved");
    }
    if a.expand_links && !cli.dry_run {
        let resolver = HttpResolver::new(std::time::Duration::from_secs(10))
            .map_err(|e| CliError::Failed(format!("link resolver: {e}")))?;
        let expander = LinkExpander::new(resolver).with_cache_file(cli.data_dir.join("link_cache.json"))?;
        let mut expanded = 0;
        for inst in bundle.instances.values_mut() {
            expanded += expander.expand_instance(inst).resolved.len();
        }
        expander.save_cache()?;
        out(format!("expanded {expanded} links"));
    }
    let labeled = bundle.instances.values().filter(|i| i.label.is_some()).count();
    out(format!("{} instances, {labeled} labeled, {} ties", bundle.len(), ties.len()));
    if cli.dry_run {
        out(format!("dry run: would write {}", dataset_path(cli).display()));
        return Ok(());
    }
    std::fs::create_dir_all(&cli.data_dir)?;
    bundle.save_jsonl(&dataset_path(cli))?;
    out(format!("wrote {}", dataset_path(cli).display()));
    Ok(())
}

fn cmd_split(cli: &Cli, a: &SplitArgs) -> Result<(), CliError> {
    let mut bundle = DatasetBundle::load_jsonl(&dataset_path(cli))?;
    bundle.splits.clear();
    let spec = SplitSpec {
        full_train: a.full_train,
        full_dev: a.full_dev,
        test: a.test,
        fewshot_train: a.fewshot_train,
        fewshot_dev: a.fewshot_dev,
        seed: cli.seed.unwrap_or(0),
        stratify: !a.no_stratify,
    };
    let split = make_splits(&bundle, &spec)?;
    for (name, ids) in &split.splits {
        out(format!("{name}: {}", ids.len()));
    }
    if cli.dry_run {
        out(format!("dry run: would write {}", manifest_path(cli).display()));
        return Ok(());
    }
    split.manifest().save(&manifest_path(cli))?;
    out(format!("wrote {}", manifest_path(cli).display()));
    Ok(())
}

/// Reads a label file: `id label` lines, or one label per line.
fn read_labels(path: &Path) -> Result<(Vec<String>, Option<Vec<String>>), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    let rows: Vec<Vec<&str>> =
        text.lines().map(|l| l.split_whitespace().collect::<Vec<_>>()).filter(|r| !r.is_empty()).collect();
    if rows.iter().all(|r| r.len() == 2) && !rows.is_empty() {
        let ids = rows.iter().map(|r| r[0].to_string()).collect();
        return Ok((rows.iter().map(|r| r[1].to_string()).collect(), Some(ids)));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != 1) {
        return Err(CliError::Failed(format!("{}: line {} is neither `label` nor `id label`", path.display(), bad + 1)));
    }
    Ok((rows.iter().map(|r| r[0].to_string()).collect(), None))
}

fn cmd_kappa(cli: &Cli, a: &KappaArgs) -> Result<(), CliError> {
    let (kappa, n) = match (&a.a, &a.b, &a.coders) {
        (Some(pa), Some(pb), None) => {
            let (la, ia) = read_labels(pa)?;
            let (lb, ib) = read_labels(pb)?;
            match (ia, ib) {
                (Some(ia), Some(ib)) => {
                    let mb: std::collections::BTreeMap<&String, &String> = ib.iter().zip(&lb).collect();
                    let (x, y): (Vec<&String>, Vec<&String>) =
                        ia.iter().zip(&la).filter_map(|(id, l)| Some((l, *mb.get(id)?))).unzip();
                    (cohen_kappa(&x, &y)?, x.len())
                }
                _ => (cohen_kappa(&la, &lb)?, la.len()),
            }
        }
        (None, None, Some(coders)) => pairwise_kappa(&load_bundle(cli, None)?, &coders[0], &coders[1])?,
        _ => return Err(CliError::Usage("give --a and --b, or --coders".into())),
    };
    log::info!("kappa over {n} items");
    out(format!("{kappa:.4}"));
    Ok(())
}

fn cmd_augment(cli: &Cli, a: &AugmentArgs) -> Result<(), CliError> {
    let cfg = optional_config(cli)?;
    let mut spec = match (&a.job, a.class) {
        (Some(id), _) => cfg
            .as_ref()
            .and_then(|c| c.augmentation.as_ref())
            .and_then(|s| s.jobs.iter().find(|j| &j.id == id))
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("no augmentation job {id:?} in the config")))?,
        (None, Some(label)) => AugmentationJobSpec::for_class(format!("aug-{label}"), label),
        (None, None) => return Err(CliError::Usage("give --job or --class".into())),
    };
    if let Some(m) = a.mode {
        spec.mode = m.into();
    }
    if let Some(n) = a.n {
        spec.n_per_instance = n;
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let bundle = load_bundle(cli, cfg.as_ref())?;
    let sources = bundle
        .split(&a.source_split)?
        .into_iter()
        .filter(|i| i.label == Some(spec.class_label))
        .cloned()
        .collect();
    let job = AugmentationJob::new(spec, sources)?;
    let dir = review_service::job_dir(&cli.data_dir, job.id());
    if cli.dry_run {
        out(format!(
            "dry run: job {} would request {} instances from {} sources into {}",
            job.id(),
            job.quota(),
            job.sources().len(),
            dir.display()
        ));
        return Ok(());
    }
    let plan = cfg.as_ref().map(|c| c.plan.clone()).unwrap_or_else(|| PipelinePlan::new(Vec::new()));
    let backends = backends(cli, &bundle, &plan);
    let generator = backends.generator(&job)?;
    let outcome = generate_candidates(&job, generator.as_ref())?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&dir)?;
    write_candidates(&dir.join("candidates.jsonl"), &outcome.candidates)?;
    outcome.manifest.save(&dir.join("manifest.json"))?;
    out(format!("{}: {} candidates (quota {}) in {}", job.id(), outcome.candidates.len(), job.quota(), dir.display()));
    Ok(())
}

fn load_manifest(dir: &Path) -> Result<JobManifest, CliError> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn print_counts(state: &FilterState) {
    let c = state.counts();
    out(format!(
        "version {}: {} kept, {} dropped, {} pending of {}",
        state.version, c.kept, c.dropped, c.pending, c.total
    ));
}

fn cmd_filter(cli: &Cli, action: &FilterAction) -> Result<(), CliError> {
    match action {
        FilterAction::Rank { job, force } => {
            let dir = review_service::job_dir(&cli.data_dir, job);
            let manifest = load_manifest(&dir)?;
            let candidates = read_candidates(&dir.join("candidates.jsonl"))?;
            let bundle = load_bundle(cli, optional_config(cli)?.as_ref())?;
            let originals = manifest
                .source_ids
                .iter()
                .map(|id| bundle.get(id).cloned().ok_or_else(|| CliError::Failed(format!("source {id:?} is not in the dataset"))))
                .collect::<Result<Vec<_>, _>>()?;
            if let Ok(existing) = load_job_state(&cli.data_dir, job) {
                if existing.version > 0 && !force {
                    return Err(CliError::Failed(format!(
                        "job {job} already has review history (version {}); pass --force to replace it",
                        existing.version
                    )));
                }
            }
            let plan = PipelinePlan::new(Vec::new());
            let backends = backends(cli, &bundle, &plan);
            let state = embed_and_rank(
                job,
                manifest.job.class_label,
                candidates,
                &originals,
                backends.embedder(),
                &FilterConfig::default(),
            )?;
            print_counts(&state);
            if cli.dry_run {
                out("dry run: state not written");
            } else {
                let path = save_job_state(&cli.data_dir, &state)?;
                out(format!("wrote {}", path.display()));
            }
        }
        FilterAction::SuggestThreshold { job, keep_fraction } => {
            let state = load_job_state(&cli.data_dir, job)?;
            let tau = suggest_threshold(&state, *keep_fraction)?;
            let delta = default_review_delta(&state, tau)?;
            out(format!("tau {tau:.6}"));
            out(format!("delta {delta:.6}"));
        }
        FilterAction::Apply { job, tau, delta } => {
            let mut state = load_job_state(&cli.data_dir, job)?;
            let delta = match delta {
                Some(d) => *d,
                None => default_review_delta(&state, *tau)?,
            };
            let v = state.version;
            state.set_threshold(*tau, delta, v)?;
            print_counts(&state);
            if !cli.dry_run {
                save_job_state(&cli.data_dir, &state)?;
            }
        }
        FilterAction::Export { job, output } => {
            let state = load_job_state(&cli.data_dir, job)?;
            let kept = export_filtered(&state)?;
            let path = output.clone().unwrap_or_else(|| review_service::job_dir(&cli.data_dir, job).join("filtered.jsonl"));
            if cli.dry_run {
                out(format!("dry run: would write {} instances to {}", kept.len(), path.display()));
            } else {
                DatasetBundle::from_instances(kept.iter().cloned())?.save_jsonl(&path)?;
                out(format!("wrote {} instances to {}", kept.len(), path.display()));
            }
        }
    }
    Ok(())
}

fn cmd_serve(cli: &Cli, a: &ServeArgs) -> Result<(), CliError> {
    if cli.dry_run {
        let n = review_service::ReviewService::open(&cli.data_dir)?.list_jobs()?.len();
        out(format!("dry run: would serve {n} jobs on {}", a.listen));
        return Ok(());
    }
    review_service::serve(review_service::ServeOptions {
        listen: a.listen,
        data_dir: cli.data_dir.clone(),
        token: a.token.clone(),
        ui_dir: a.ui_dir.clone(),
    })?;
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<(), CliError> {
    let cfg = config(cli)?;
    let seed = cli.seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0);
    let bundle = load_bundle(cli, Some(&cfg))?;
    let plan = validate_plan(cfg.plan.clone())?;
    let backends = backends(cli, &bundle, &cfg.plan);

    let mut augmented = Vec::new();
    for path in &a.augmented {
        augmented.extend(DatasetBundle::load_jsonl(path)?.instances.into_values());
    }
    if a.augmented.is_empty() {
        if let Some(setup) = &cfg.augmentation {
            if cli.dry_run {
                out("dry run: augmentation would run before training");
            } else {
                augmented = augment_and_filter(setup, &bundle, backends.as_ref(), seed)?;
            }
        }
    }
    check_plan_data(&plan, &bundle, &augmented)?;
    if cli.dry_run {
        out(format!("dry run: plan with {} stages is valid; seed {seed}", plan.stages.len()));
        return Ok(());
    }

    let mut model = backends.masked_lm(seed);
    let opts = RunOptions {
        experiment: cfg.experiment.clone(),
        seed,
        runs_dir: Some(cli.data_dir.join("runs").join(&cfg.experiment)),
    };
    let run = run_pipeline(&plan, model.as_mut(), &bundle, Some(&augmented), &opts)?;
    for s in &run.stages {
        let metrics = s
            .metrics
            .as_ref()
            .and_then(|m| m.eval.as_ref())
            .map(|e| format!(" {}: acc {:.4} f1 {:.4}", e.dataset, e.accuracy, e.f1))
            .unwrap_or_default();
        out(format!("level {} {:?}: {:?} {}{metrics}", s.config.level, s.config.kind, s.status, s.output_checkpoint.as_deref().unwrap_or("-")));
    }
    if let Ok(dev) = bundle.split(FULL_DEV).or_else(|_| bundle.split(FULL_TRAIN)) {
        if !dev.is_empty() && dev.iter().all(|i| i.label.is_some()) {
            let dev: Vec<_> = dev.into_iter().cloned().collect();
            let m = evaluate_model(model.as_ref(), &plan, plan.final_objective(), FULL_DEV, &dev)?;
            log::info!("final model on {}: acc {:.4} f1 {:.4}", m.dataset, m.accuracy, m.f1);
        }
    }
    out(format!("run {} ({} augmented instances)", run.run_id, run.augmented_ids.len()));
    Ok(())
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs, ablate: bool) -> Result<(), CliError> {
    let cfg = config(cli)?;
    let bundle = load_bundle(cli, Some(&cfg))?;
    let plan = validate_plan(cfg.plan.clone())?;
    bundle.split(&a.test_split)?;
    let settings = ExperimentSettings {
        seeds: seeds(cli, &cfg),
        augmentation: cfg.augmentation.clone(),
        out_dir: cli.data_dir.clone(),
        test_split: a.test_split.clone(),
    };
    let experiments: Vec<Experiment> = if ablate {
        ablation_matrix(&cfg.plan, settings.augmentation.is_some())
    } else {
        vec![Experiment { name: cfg.experiment.clone(), plan: cfg.plan.clone(), augment: true }]
    };
    if cli.dry_run {
        for e in &experiments {
            let p = validate_plan(e.plan.clone())?;
            check_plan_data(&p, &bundle, &[])?;
            out(format!("dry run: {} ({} stages) over seeds {:?}", e.name, p.stages.len(), settings.seeds));
        }
        return Ok(());
    }
    let backends = backends(cli, &bundle, &plan);
    if ablate {
        let outcome = run_ablation(&plan, &bundle, backends.as_ref(), &settings)?;
        for o in &outcome.completed {
            out(format!("{}: {}", o.report_dir.display(), o.report.table_row().trim_end()));
        }
        for (name, e) in &outcome.failed {
            eprintln!("experiment {name} failed: {e}");
        }
        if !outcome.success() {
            return Err(CliError::Failed(format!("{} of 4 experiments failed", outcome.failed.len())));
        }
    } else {
        let o = run_experiment(&experiments[0], &bundle, backends.as_ref(), &settings)?;
        out(render_table(std::slice::from_ref(&o.report)).trim_end());
        out(format!("wrote {}", o.report_dir.display()));
    }
    Ok(())
}

fn cmd_report(cli: &Cli) -> Result<(), CliError> {
    let dir = cli.data_dir.join("reports");
    let mut reports = Vec::new();
    if dir.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        for p in paths {
            reports.push(ExperimentReport::load(&p)?);
        }
    }
    if reports.is_empty() {
        return Err(CliError::Failed(format!("no reports under {}", dir.display())));
    }
    let order = [crate::evalharness::FULL, crate::evalharness::WITHOUT_AUGMENTATION, crate::evalharness::WITHOUT_MULTILEVEL, crate::evalharness::WITHOUT_ADAPET];
    reports.sort_by_key(|r| (order.iter().position(|n| *n == r.experiment).unwrap_or(order.len()), r.experiment.clone()));
    let table = render_table(&reports);
    out(table.trim_end());
    if !cli.dry_run {
        crate::util::write_atomic(&dir.join("summary.md"), table.as_bytes())?;
    }
    Ok(())
}
