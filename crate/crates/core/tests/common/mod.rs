#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cti_fewshot::config::ExperimentConfig;
use cti_fewshot::corpus::{make_splits, DatasetBundle, SplitSpec};
use cti_fewshot::evalharness::AugmentationSetup;
use cti_fewshot::pipeline::PipelinePlan;
use cti_fewshot::synthetic::{synthetic_bundle, synthetic_corpus};

pub fn small_spec(seed: u64) -> SplitSpec {
    SplitSpec { full_train: 120, full_dev: 60, test: 60, fewshot_train: 32, fewshot_dev: 32, seed, stratify: true }
}

pub fn small_bundle() -> DatasetBundle {
    make_splits(&synthetic_bundle(240, 11), &small_spec(3)).unwrap()
}

/// Few epochs and a learning rate the small in-process model can learn with.
pub fn fast(mut plan: PipelinePlan) -> PipelinePlan {
    for s in &mut plan.stages {
        s.hyperparams.epochs = 2;
        s.hyperparams.batch_size = 16;
        s.hyperparams.learning_rate = 1e-2;
        s.hyperparams.warmup_steps = 2;
    }
    plan
}

pub fn full_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(fast(PipelinePlan::full("text:corpus.txt")));
    cfg.experiment = "full".into();
    cfg.dataset = Some("dataset.jsonl".into());
    cfg.manifest = Some("splits.json".into());
    cfg.augmentation = Some(AugmentationSetup::both_classes(1));
    cfg
}

/// Writes dataset.jsonl, splits.json, corpus.txt and full.plan into `dir`.
pub fn write_data_dir(dir: &Path) -> PathBuf {
    let bundle = small_bundle();
    let mut unsplit = bundle.clone();
    unsplit.splits.clear();
    unsplit.save_jsonl(&dir.join("dataset.jsonl")).unwrap();
    bundle.manifest().save(&dir.join("splits.json")).unwrap();
    std::fs::write(dir.join("corpus.txt"), synthetic_corpus(40, 2).join("\n")).unwrap();
    let plan = dir.join("full.plan");
    std::fs::write(&plan, full_config().to_toml()).unwrap();
    plan
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let Ok(entries) = std::fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// A `review-serve` child process on a free port; killed on drop.
pub struct Server {
    pub child: std::process::Child,
    pub base: String,
}

impl Server {
    pub fn spawn(data_dir: &Path, extra: &[&str]) -> Server {
        use std::io::BufRead;
        let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_cti-fewshot"))
            .arg("--data-dir")
            .arg(data_dir)
            .args(["review-serve", "--listen", "127.0.0.1:0"])
            .args(extra)
            .env_remove("CTI_REVIEW_TOKEN")
            .stdout(std::process::Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        std::io::BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {line:?}")).to_string();
        Server { child, base }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// SIGKILL, no graceful shutdown.
    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A ranked filter state with `n` mock-embedded candidates.
pub fn ranked_job(job_id: &str, n: usize) -> cti_fewshot::filter::FilterState {
    use cti_fewshot::augment::GeneratedCandidate;
    use cti_fewshot::backends::MockEmbedder;
    use cti_fewshot::corpus::{Label, LabeledInstance};
    use cti_fewshot::filter::{embed_and_rank, FilterConfig};
    let bundle = synthetic_bundle(n + 20, 5);
    let texts: Vec<&LabeledInstance> = bundle.instances.values().collect();
    let originals: Vec<LabeledInstance> = texts[..20].iter().map(|i| (*i).clone()).collect();
    let cands = texts[20..].iter().enumerate().map(|(k, i)| GeneratedCandidate::new(job_id, k, 0, i.text.clone())).collect();
    embed_and_rank(job_id, Label::Relevant, cands, &originals, &MockEmbedder::default(), &FilterConfig::default()).unwrap()
}
