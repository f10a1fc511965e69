mod common;

use std::path::Path;
use std::process::{Command, Output};

use cti_fewshot::corpus::{DatasetBundle, Label};
use cti_fewshot::filter::FilterState;
use cti_fewshot::synthetic::synthetic_bundle;

fn cli(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cti-fewshot"))
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .env_remove("CTI_DATA_DIR")
        .env_remove("CTI_BACKEND_ENDPOINT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

#[test]
fn usage_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(cli(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["--help"]).status.code(), Some(0));
    // Domain error: no dataset yet.
    assert_eq!(cli(dir.path(), &["split"]).status.code(), Some(1));
}

#[test]
fn kappa_from_label_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("c1.labels"), dir.path().join("c2.labels"));
    std::fs::write(&a, "relevant\nirrelevant\nrelevant\nirrelevant\n").unwrap();
    std::fs::write(&b, "relevant\nirrelevant\nrelevant\nirrelevant\n").unwrap();
    let out = ok(cli(dir.path(), &["kappa", "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap()]));
    assert_eq!(out.trim(), "1.0000");

    std::fs::write(&a, "t1 relevant\nt2 relevant\nt3 relevant\nt4 relevant\n").unwrap();
    std::fs::write(&b, "t4 irrelevant\nt3 irrelevant\nt2 relevant\nt1 relevant\n").unwrap();
    let out = ok(cli(dir.path(), &["kappa", "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap()]));
    assert_eq!(out.trim(), "0.0000");

    std::fs::write(&b, "relevant\n").unwrap();
    assert_eq!(cli(dir.path(), &["kappa", "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["kappa", "--a", a.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn ingest_split_and_coder_kappa() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.jsonl");
    let mut bundle = synthetic_bundle(200, 1);
    for (i, inst) in bundle.instances.values_mut().enumerate() {
        let gold = inst.label.take().unwrap();
        inst.annotations.insert("C1".into(), gold);
        inst.annotations.insert("C2".into(), if i % 10 == 0 { gold.other() } else { gold });
        inst.annotations.insert("C3".into(), gold);
    }
    bundle.save_jsonl(&input).unwrap();
    let data = dir.path().join("data");

    let dry = ok(cli(&data, &["--dry-run", "ingest", input.to_str().unwrap()]));
    assert!(dry.contains("200 instances, 200 labeled"));
    assert!(!data.exists());

    ok(cli(&data, &["ingest", input.to_str().unwrap()]));
    let loaded = DatasetBundle::load_jsonl(&data.join("dataset.jsonl")).unwrap();
    assert!(loaded.instances.values().all(|i| i.label == i.annotations.get("C1").copied()));

    let k13 = ok(cli(&data, &["kappa", "--coders", "C1", "C3"]));
    assert_eq!(k13.trim(), "1.0000");
    let k12: f64 = ok(cli(&data, &["kappa", "--coders", "C1", "C2"])).trim().parse().unwrap();
    assert!(k12 > 0.6 && k12 < 1.0);

    let args = ["--seed", "5", "split", "--full-train", "100", "--full-dev", "40", "--test", "60", "--fewshot-train", "16", "--fewshot-dev", "16"];
    ok(cli(&data, &[&["--dry-run"], &args[..]].concat()));
    assert!(!data.join("splits.json").exists());
    let out = ok(cli(&data, &args));
    assert!(out.contains("fewshot_train: 16"));
    let first = std::fs::read(data.join("splits.json")).unwrap();
    ok(cli(&data, &args));
    assert_eq!(first, std::fs::read(data.join("splits.json")).unwrap());
    let too_big = cli(&data, &["split", "--full-train", "500"]);
    assert_eq!(too_big.status.code(), Some(1));
}

#[test]
fn augment_filter_and_train() {
    let dir = tempfile::tempdir().unwrap();
    let plan = common::write_data_dir(dir.path());
    let data = dir.path();

    ok(cli(data, &["--dry-run", "augment", "--class", "relevant", "--n", "2"]));
    assert!(!data.join("jobs").exists());
    let out = ok(cli(data, &["--seed", "3", "augment", "--class", "relevant", "--n", "2"]));
    assert!(out.contains("aug-relevant"), "{out}");
    let job = data.join("jobs/aug-relevant");
    assert!(job.join("candidates.jsonl").is_file() && job.join("manifest.json").is_file());

    ok(cli(data, &["filter", "rank", "--job", "aug-relevant"]));
    let state = FilterState::load(&job.join("state.json")).unwrap();
    assert_eq!(state.class_label, Label::Relevant);
    assert!(state.candidates.iter().all(|c| c.nearest.is_some()));

    let suggestion = ok(cli(data, &["filter", "suggest-threshold", "--job", "aug-relevant", "--keep-fraction", "0.5"]));
    let tau: f64 = suggestion.lines().next().unwrap().strip_prefix("tau ").unwrap().parse().unwrap();
    let applied = ok(cli(data, &["filter", "apply", "--job", "aug-relevant", "--tau", &tau.to_string(), "--delta", "0"]));
    assert!(applied.contains("0 pending"), "{applied}");
    // Replacing a state with history needs --force.
    assert_eq!(cli(data, &["filter", "rank", "--job", "aug-relevant"]).status.code(), Some(1));

    ok(cli(data, &["filter", "export", "--job", "aug-relevant"]));
    let kept = DatasetBundle::load_jsonl(&job.join("filtered.jsonl")).unwrap();
    assert!(!kept.is_empty());
    assert!(kept.instances.values().all(|i| i.label == Some(Label::Relevant)));

    let plan = plan.to_str().unwrap();
    let filtered = job.join("filtered.jsonl");
    ok(cli(data, &["--config", plan, "--dry-run", "train", "--augmented", filtered.to_str().unwrap()]));
    assert!(!data.join("runs").exists());
    let out = ok(cli(data, &["--config", plan, "--seed", "2", "train", "--augmented", filtered.to_str().unwrap()]));
    assert!(out.contains(&format!("({} augmented instances)", kept.len())), "{out}");
    assert_eq!(std::fs::read_dir(data.join("runs/full")).unwrap().count(), 1);

    // Unknown config keys are rejected; overrides apply on top of the file.
    assert_eq!(cli(data, &["--config", plan, "--set", "plan.stages.3.epochz=1", "--dry-run", "train"]).status.code(), Some(1));
    ok(cli(data, &["--config", plan, "--set", "plan.stages.3.objective=head", "--dry-run", "train"]));
}

#[test]
fn evaluate_ablate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let plan = common::write_data_dir(dir.path());
    let (data, plan) = (dir.path(), plan.to_str().unwrap());

    ok(cli(data, &["--plan", plan, "--dry-run", "ablate"]));
    assert!(!data.join("reports").exists() && !data.join("runs").exists());

    let out = ok(cli(data, &["--plan", plan, "--set", "seeds=[1,2]", "evaluate"]));
    assert!(out.contains("| full |"), "{out}");
    assert!(data.join("reports/full/report.json").is_file());

    ok(cli(data, &["--plan", plan, "--set", "seeds=[1,2,3]", "ablate"]));
    for arm in ["full", "without_augmentation", "without_multilevel", "without_adapet"] {
        for f in ["report.json", "table.md", "distribution.csv"] {
            assert!(data.join("reports").join(arm).join(f).is_file(), "{arm}/{f}");
        }
    }
    let table = ok(cli(data, &["report"]));
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Experiment")).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("| full |"));
    assert!(data.join("reports/summary.md").is_file());

    // A broken arm makes ablate fail with a nonzero exit, but the rest still report.
    let broken = cli(data, &["--plan", plan, "--set", "plan.stages.1.dataset=text:missing.txt", "ablate"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&broken.stderr).contains("failed"));
}
