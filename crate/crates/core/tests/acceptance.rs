//! Acceptance suite: one PASS/FAIL line per criterion, each with its runtime
//! budget. Runs as a plain binary so the lines always show in `cargo test`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cti_fewshot::augment::{
    parse_completion, prime_class_corpus, prime_indexed_short, strip_indexed_wrapper, Decision, GeneratedCandidate,
    RELEVANT_PRIMING,
};
use cti_fewshot::backends::{Embedder, EmbeddingVector, MockEmbedder};
use cti_fewshot::corpus::{
    cohen_kappa, make_splits, pairwise_kappa, DatasetBundle, Label, LabeledInstance, SplitSpec, FEWSHOT_DEV,
    FEWSHOT_TRAIN, FULL_DEV, FULL_TRAIN, TEST,
};
use cti_fewshot::evalharness::{aggregate, format_cell, AggregateCell, ExperimentReport};
use cti_fewshot::fewshot::{
    apply_pattern, classification_head_loss, classification_head_loss_grad, decoupled_label_loss,
    decoupled_label_loss_grad, softmax, Pattern,
};
use cti_fewshot::filter::{
    apply_threshold, levenshtein, nearest_counterpart, rank_candidates, FilterConfig, OriginalRef,
};
use cti_fewshot::pipeline::{verify_lineage, PipelineRun, StageStatus};
use cti_fewshot::review_service::save_job_state;
use cti_fewshot::synthetic::synthetic_bundle;

const KAPPA_TOL: f64 = 1e-12;
const KAPPA_RELEASED_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const HAND_VALUE_TOL: f64 = 1e-4;
const STD_TOL: f64 = 1e-9;
const COSINE_TOL: f64 = 1e-12;

/// Outcome detail printed after PASS.
type Check = fn() -> String;

fn main() {
    let criteria: &[(&str, Duration, Check)] = &[
        ("kappa oracle suite", Duration::from_secs(5), kappa_oracle),
        ("split reproduction", Duration::from_secs(5), split_reproduction),
        ("filter oracle equivalence", Duration::from_secs(10), filter_oracle),
        ("nearest-counterpart oracle", Duration::from_secs(30), counterpart_oracle),
        ("template exactness", Duration::from_secs(5), template_exactness),
        ("loss gradient checks", Duration::from_secs(5), gradient_checks),
        ("priming round-trip", Duration::from_secs(5), priming_round_trip),
        ("aggregation and formatting", Duration::from_secs(5), aggregation_formatting),
        ("end-to-end mock ablation", Duration::from_secs(60), end_to_end_ablation),
        ("review service durability", Duration::from_secs(30), review_durability),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let took = start.elapsed();
        match result {
            Ok(detail) if took <= *budget => {
                println!("PASS  {name} ({:.2}s, budget {}s): {detail}", took.as_secs_f64(), budget.as_secs())
            }
            Ok(_) => {
                failed += 1;
                println!("FAIL  {name}: took {:.2}s, budget {}s", took.as_secs_f64(), budget.as_secs());
            }
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {name} ({:.2}s): {msg}", took.as_secs_f64());
            }
        }
    }
    println!("\nacceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- kappa

/// (p_o - p_e) / (1 - p_e) straight from the definition, in floating point.
fn kappa_oracle_value(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len() as f64;
    let po = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let cats: BTreeSet<u8> = a.iter().chain(b).copied().collect();
    let pe: f64 = cats
        .iter()
        .map(|c| {
            let fa = a.iter().filter(|x| *x == c).count() as f64 / n;
            let fb = b.iter().filter(|x| *x == c).count() as f64 / n;
            fa * fb
        })
        .sum();
    if (1.0 - pe).abs() < 1e-15 {
        return 1.0;
    }
    (po - pe) / (1.0 - pe)
}

fn kappa_oracle() -> String {
    use Label::{Irrelevant as I, Relevant as R};
    assert_eq!(cohen_kappa(&[R, I, R], &[R, I, R]).unwrap(), 1.0);
    assert_eq!(cohen_kappa(&[R, R, R, R], &[R, R, I, I]).unwrap(), 0.0);
    assert_eq!(cohen_kappa(&[R, R], &[R, R]).unwrap(), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(0xca99a);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let k = rng.random_range(2..5u8);
        let agree = rng.random_range(0.0..1.0);
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let b: Vec<u8> =
            a.iter().map(|x| if rng.random_bool(agree) { *x } else { rng.random_range(0..k) }).collect();
        let kab = cohen_kappa(&a, &b).unwrap();
        assert!((kab - kappa_oracle_value(&a, &b)).abs() < KAPPA_TOL, "oracle mismatch on {a:?} vs {b:?}");
        assert_eq!(kab, cohen_kappa(&b, &a).unwrap(), "asymmetric on {a:?} vs {b:?}");
        let mut perm: Vec<u8> = (0..k).collect();
        perm.shuffle(&mut rng);
        let pa: Vec<u8> = a.iter().map(|x| perm[*x as usize]).collect();
        let pb: Vec<u8> = b.iter().map(|x| perm[*x as usize]).collect();
        assert!((kab - cohen_kappa(&pa, &pb).unwrap()).abs() < KAPPA_TOL, "not permutation invariant");
        assert!((-1.0..=1.0).contains(&kab));
    }

    match std::env::var_os("CTI_ANNOTATIONS") {
        Some(path) => {
            let bundle = DatasetBundle::load_jsonl(Path::new(&path)).expect("annotation file");
            for (a, b, want) in [("C1", "C2", 0.8763), ("C2", "C3", 0.7446), ("C1", "C3", 0.8709)] {
                let (k, n) = pairwise_kappa(&bundle, a, b).unwrap();
                assert!((k - want).abs() <= KAPPA_RELEASED_TOL, "kappa({a},{b}) = {k:.4} over {n}, expected {want}");
            }
            "fixtures, 1000 random cases and released annotations 0.8763/0.7446/0.8709".into()
        }
        None => "fixtures and 1000 random cases; released-annotation check skipped (CTI_ANNOTATIONS unset)".into(),
    }
}

// ---------------------------------------------------------------- splits

fn split_reproduction() -> String {
    let bundle = synthetic_bundle(3001, 77);
    let all: BTreeSet<&String> = bundle.instances.keys().collect();
    let mut first: Option<DatasetBundle> = None;
    for _ in 0..10 {
        let s = make_splits(&bundle, &SplitSpec::published(2023)).unwrap();
        let ids = |name: &str| -> BTreeSet<String> { s.split_ids(name).unwrap().iter().cloned().collect() };
        let (tr, dv, te, ftr, fdv) = (ids(FULL_TRAIN), ids(FULL_DEV), ids(TEST), ids(FEWSHOT_TRAIN), ids(FEWSHOT_DEV));
        assert_eq!([tr.len(), dv.len(), te.len(), ftr.len(), fdv.len()], [1800, 600, 601, 32, 32]);
        assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te));
        assert!(ftr.is_subset(&tr) && fdv.is_subset(&dv));
        let union: BTreeSet<&String> = tr.iter().chain(&dv).chain(&te).collect();
        assert_eq!(union, all);
        for few in [&ftr, &fdv] {
            let rel = few.iter().filter(|id| s.get(id).unwrap().label == Some(Label::Relevant)).count();
            assert_eq!(rel, 16, "few-shot split not stratified");
        }
        match &first {
            None => first = Some(s),
            Some(f) => assert_eq!(f.splits, s.splits, "splits differ between repeats"),
        }
    }
    let other = make_splits(&bundle, &SplitSpec::published(2024)).unwrap();
    assert_ne!(first.unwrap().splits, other.splits, "seed has no effect");
    "1800/600/601/32/32, disjoint, nested, stratified, identical over 10 repeats".into()
}

// ---------------------------------------------------------------- filter

fn random_texts(rng: &mut ChaCha8Rng, n: usize, prefix: &str) -> Vec<String> {
    const WORDS: &[&str] = &[
        "patch", "exploit", "router", "cve", "breach", "garden", "cake", "leak", "malware", "phish", "concert", "vpn",
        "server", "beach", "zero-day", "botnet", "tea", "ransom",
    ];
    (0..n)
        .map(|i| {
            let k = rng.random_range(2..9);
            let words: Vec<&str> = (0..k).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            format!("{prefix}{i} {}", words.join(" "))
        })
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Brute force: centroid of unit originals, cosine distance, sort by (distance, id).
fn brute_force_ranking(cands: &[(String, Vec<f64>)], originals: &[Vec<f64>]) -> Vec<(String, f64)> {
    let dim = originals[0].len();
    let mut centroid = vec![0.0; dim];
    for o in originals {
        for (c, x) in centroid.iter_mut().zip(unit(o)) {
            *c += x / originals.len() as f64;
        }
    }
    let mut out: Vec<(String, f64)> = cands.iter().map(|(id, e)| (id.clone(), 1.0 - cosine(e, &centroid))).collect();
    out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

fn filter_oracle() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf117e5);
    let embedder = MockEmbedder::default();
    let cand_texts = random_texts(&mut rng, 100, "cand");
    let orig_texts = random_texts(&mut rng, 24, "orig");
    let cand_emb = embedder.embed(&cand_texts).unwrap();
    let orig_emb = embedder.embed(&orig_texts).unwrap();
    let candidates: Vec<GeneratedCandidate> =
        cand_texts.iter().enumerate().map(|(i, t)| GeneratedCandidate::new("job", i, 0, t.clone())).collect();
    let state = rank_candidates("job", Label::Relevant, candidates.clone(), &cand_emb, &orig_emb, &FilterConfig::default())
        .unwrap();

    let oracle_in: Vec<(String, Vec<f64>)> = candidates.iter().zip(&cand_emb).map(|(c, e)| (c.id.clone(), e.0.clone())).collect();
    let origs: Vec<Vec<f64>> = orig_emb.iter().map(|e| e.0.clone()).collect();
    let oracle = brute_force_ranking(&oracle_in, &origs);
    let order: Vec<&str> = state.candidates.iter().map(|c| c.id.as_str()).collect();
    let oracle_order: Vec<&str> = oracle.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(order, oracle_order, "ordering differs from brute force");

    let (lo, hi) = (oracle[0].1, oracle[oracle.len() - 1].1);
    let mut taus: Vec<f64> = (0..100).map(|_| rng.random_range(lo.max(0.0)..=hi)).collect();
    taus.sort_by(f64::total_cmp);
    let mut previous: BTreeSet<String> = BTreeSet::new();
    for tau in &taus {
        let mut s = state.clone();
        apply_threshold(&mut s, *tau, 0.0).unwrap();
        let kept: BTreeSet<String> = s.candidates.iter().filter(|c| c.decision == Decision::AutoKeep).map(|c| c.id.clone()).collect();
        let expected: BTreeSet<String> = oracle.iter().filter(|(_, d)| d <= tau).map(|(id, _)| id.clone()).collect();
        assert_eq!(kept, expected, "keep set differs from brute force at tau {tau}");
        assert!(s.candidates.iter().all(|c| c.decision != Decision::Pending));
        assert!(previous.is_subset(&kept), "keep set shrank as tau grew");
        previous = kept;
    }

    for normalize in [true, false] {
        let config = FilterConfig { normalize, ..FilterConfig::default() };
        let base = rank_candidates("job", Label::Relevant, candidates.clone(), &cand_emb, &orig_emb, &config).unwrap();
        let scaled: Vec<EmbeddingVector> = cand_emb.iter().map(|e| e.scaled(rng.random_range(0.01..100.0))).collect();
        let s = rank_candidates("job", Label::Relevant, candidates.clone(), &scaled, &orig_emb, &config).unwrap();
        let ids = |st: &cti_fewshot::filter::FilterState| st.candidates.iter().map(|c| c.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&base), ids(&s), "ordering changed under positive scaling (normalize={normalize})");
    }
    "100 candidates: ordering and keep sets equal brute force, nested over 100 thresholds, scale-invariant".into()
}

// ---------------------------------------------------------------- counterparts

fn dp_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn random_string(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[char] = &['a', 'b', 'c', 'd', ' ', 'é', 'ß', '→', '#', '1'];
    let n = rng.random_range(0..40);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn counterpart_oracle() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1e7e);
    for _ in 0..500 {
        let a = random_string(&mut rng);
        let b = if rng.random_bool(0.3) {
            let mut s: Vec<char> = a.chars().collect();
            if !s.is_empty() {
                let i = rng.random_range(0..s.len());
                s[i] = 'x';
            }
            s.into_iter().collect()
        } else {
            random_string(&mut rng)
        };
        assert_eq!(levenshtein(&a, &b), dp_levenshtein(&a, &b), "levenshtein({a:?}, {b:?})");
    }

    for _ in 0..50 {
        let dim = 6;
        let mut pool: Vec<(String, String, EmbeddingVector)> = (0..50)
            .map(|i| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                (format!("o-{i:03}"), random_string(&mut rng), EmbeddingVector(v))
            })
            .collect();
        // Duplicate directions exercise the tie-break.
        for _ in 0..5 {
            let (src, dst) = (rng.random_range(0..50), rng.random_range(0..50));
            let factor = rng.random_range(0.5..2.0);
            pool[dst].2 = pool[src].2.scaled(factor);
        }
        let refs: Vec<OriginalRef> =
            pool.iter().map(|(id, text, e)| OriginalRef { id, text, embedding: e }).collect();
        for _ in 0..50 {
            let text = random_string(&mut rng);
            let emb = if rng.random_bool(0.2) {
                pool[rng.random_range(0..50)].2.clone()
            } else {
                EmbeddingVector((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            };
            let got = nearest_counterpart(&text, &emb, &refs).unwrap();
            let sims: Vec<f64> = pool.iter().map(|(_, _, e)| cosine(&emb.0, &e.0)).collect();
            let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let winner = pool
                .iter()
                .zip(&sims)
                .filter(|(_, s)| (best - **s).abs() <= COSINE_TOL)
                .map(|((id, t, _), s)| (id.clone(), t.clone(), *s))
                .min_by(|a, b| a.0.cmp(&b.0))
                .unwrap();
            assert_eq!(got.original_id, winner.0);
            assert_eq!(got.original_text, winner.1);
            assert!((got.cosine_similarity - winner.2).abs() <= COSINE_TOL);
            assert_eq!(got.levenshtein_distance, dp_levenshtein(&text, &winner.1));
        }
    }
    "500 Levenshtein pairs and 50 pools of 50x50 match exhaustive oracles".into()
}

// ---------------------------------------------------------------- template

fn template_exactness() -> String {
    let tail = " Question : Is this text helpful for cybersecurity experts? Answer : <MASK>. [SEP]";
    let pattern = Pattern::default();
    for post in ["Patch now", "New ransomware strain targets hospital VPNs #infosec", "Lovely sunset at the beach today"] {
        let enc = apply_pattern(&pattern, post).unwrap();
        assert_eq!(enc.text.as_bytes(), format!("{post}{tail}").as_bytes());
        assert_eq!(enc.mask_positions, vec![enc.text.find("<MASK>").unwrap()]);
    }
    "3 posts rendered byte-for-byte".into()
}

// ---------------------------------------------------------------- gradients

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn fd_check(f: &dyn Fn(&[f64]) -> f64, z: &[f64], analytic: &[f64]) {
    for j in 0..z.len() {
        let mut up = z.to_vec();
        let mut down = z.to_vec();
        up[j] += FD_STEP;
        down[j] -= FD_STEP;
        let numeric = (f(&up) - f(&down)) / (2.0 * FD_STEP);
        assert!(
            rel_err(numeric, analytic[j]) <= FD_REL_TOL,
            "component {j}: numeric {numeric} vs analytic {}",
            analytic[j]
        );
    }
}

fn gradient_checks() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ead);
    for _ in 0..100 {
        let z: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let correct = rng.random_range(0..10);
        let (_, g) = decoupled_label_loss_grad(&z, correct).unwrap();
        fd_check(&|z: &[f64]| decoupled_label_loss(&softmax(z), correct).unwrap(), &z, &g);

        let h: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gold = if rng.random_bool(0.5) { Label::Relevant } else { Label::Irrelevant };
        let (_, g) = classification_head_loss_grad(&h, gold).unwrap();
        fd_check(&|z: &[f64]| classification_head_loss(z, gold).unwrap(), &h, &g);
    }
    for k in 0..10 {
        let mut onehot = vec![0.0; 10];
        onehot[k] = 1.0;
        assert_eq!(decoupled_label_loss(&onehot, k).unwrap(), 0.0);
    }
    let a = decoupled_label_loss(&[0.5, 0.5], 0).unwrap();
    let b = decoupled_label_loss(&[0.5, 0.25, 0.25], 0).unwrap();
    assert!((a - 1.3863).abs() <= HAND_VALUE_TOL, "{a}");
    assert!((b - 1.2685).abs() <= HAND_VALUE_TOL, "{b}");
    format!("100 random cases within {FD_REL_TOL:e}; one-hot loss 0; {a:.4} and {b:.4}")
}

// ---------------------------------------------------------------- priming

fn priming_round_trip() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e1);
    const CHARS: &[char] = &['a', 'z', 'Q', ' ', '-', '>', '#', '@', '.', 'é', '7', '|', '<'];
    let mut texts = Vec::new();
    while texts.len() < 1000 {
        let n = rng.random_range(1..60);
        let t: String = (0..n).map(|_| CHARS[rng.random_range(0..CHARS.len())]).collect();
        let t = t.trim().to_string();
        if !t.is_empty() && !t.contains(RELEVANT_PRIMING) {
            texts.push(t);
        }
    }
    for chunk in texts.chunks(25) {
        let primed = prime_class_corpus(chunk, RELEVANT_PRIMING).unwrap();
        assert_eq!(parse_completion(&primed, RELEVANT_PRIMING), chunk);
    }
    let instances: Vec<LabeledInstance> =
        texts.iter().enumerate().map(|(i, t)| LabeledInstance::new(format!("t{i}"), t.clone(), Some(Label::Relevant))).collect();
    let primed = prime_indexed_short(&instances).unwrap();
    for (i, (entry, inst)) in primed.entries.iter().zip(&instances).enumerate() {
        assert_eq!(entry.source_id, inst.id);
        assert_eq!(strip_indexed_wrapper(&entry.text), Some((i + 1, inst.text.clone())));
    }
    "1000 texts recovered exactly from class prompts and indexed wrappers".into()
}

// ---------------------------------------------------------------- aggregation

fn aggregation_formatting() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa66);
    for _ in 0..1000 {
        let n = rng.random_range(2..12);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let c = aggregate(&xs).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((c.std - std).abs() <= STD_TOL && (c.mean - mean).abs() <= STD_TOL);
        assert_eq!(c.min, xs.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(c.max, xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let cell = |min, mean, std, max| AggregateCell { min, mean, std, max };
    assert_eq!(format_cell(&cell(80.42, 80.63, 0.27, 81.07)), "80.42/ 80.63(0.27) /81.07");
    assert_eq!(format_cell(&cell(59.30, 62.54, 4.32, 69.81)), "59.30/ 62.54(4.32) /69.81");
    "population std within 1e-9 on 1000 run sets; both reference cells exact".into()
}

// ---------------------------------------------------------------- end to end

fn ablate_in(dir: &Path) {
    common::write_data_dir(dir);
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_cti-fewshot"))
        .current_dir(dir)
        .args(["--data-dir", ".", "ablate", "--plan", "full.plan"])
        .env_remove("CTI_DATA_DIR")
        .output()
        .unwrap();
    assert!(out.status.success(), "ablate failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn run_records(dir: &Path) -> Vec<(PathBuf, PipelineRun)> {
    let mut out = Vec::new();
    for arm in std::fs::read_dir(dir.join("runs")).unwrap().flatten() {
        for f in std::fs::read_dir(arm.path()).unwrap().flatten() {
            out.push((f.path(), PipelineRun::load(&f.path()).unwrap()));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn end_to_end_ablation() -> String {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ablate_in(a.path());
    ablate_in(b.path());

    let arms = ["full", "without_augmentation", "without_multilevel", "without_adapet"];
    for arm in arms {
        let report = ExperimentReport::load(&a.path().join("reports").join(arm).join("report.json")).unwrap();
        assert_eq!(report.runs.len(), 5);
    }
    let ra = common::snapshot_tree(&a.path().join("reports"));
    let rb = common::snapshot_tree(&b.path().join("reports"));
    assert_eq!(ra.len(), arms.len() * 3 + 1);
    assert!(ra == rb, "reports differ between identical invocations");
    assert!(common::snapshot_tree(&a.path().join("runs")) == common::snapshot_tree(&b.path().join("runs")));

    let bundle = common::small_bundle();
    assert_eq!(bundle.split_ids(FEWSHOT_TRAIN).unwrap().len(), 32);
    let held_out: BTreeSet<&String> =
        [FULL_DEV, FEWSHOT_DEV, TEST].iter().flat_map(|s| bundle.split_ids(s).unwrap()).collect();
    let runs = run_records(a.path());
    let mut per_arm: BTreeMap<String, usize> = BTreeMap::new();
    let mut augmented_total = 0;
    for (path, run) in &runs {
        verify_lineage(run).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(run.completed && run.stages.iter().all(|s| s.status == StageStatus::Completed));
        for w in run.stages.windows(2) {
            assert_eq!(w[1].input_checkpoint, w[0].output_checkpoint, "broken chain in {}", path.display());
        }
        let leaked: Vec<_> = run.augmented_ids.iter().filter(|id| held_out.contains(id)).collect();
        assert!(leaked.is_empty(), "augmented ids in held-out splits: {leaked:?}");
        augmented_total += run.augmented_ids.len();
        *per_arm.entry(run.experiment.clone()).or_default() += 1;
    }
    assert_eq!(per_arm.keys().map(String::as_str).collect::<BTreeSet<_>>(), arms.into_iter().collect());
    assert!(augmented_total > 0, "no augmented data reached any run");
    format!(
        "4 arms x 5 seeds = {} run records with verified lineage, no leakage, byte-identical reports",
        runs.len()
    )
}

// ---------------------------------------------------------------- review service

fn put(client: &reqwest::blocking::Client, url: String, body: serde_json::Value) -> (u16, serde_json::Value) {
    let r = client.put(url).json(&body).send().unwrap();
    let status = r.status().as_u16();
    (status, r.json().unwrap())
}

fn review_durability() -> String {
    let dir = tempfile::tempdir().unwrap();
    save_job_state(dir.path(), &common::ranked_job("job-r", 60)).unwrap();
    let client = reqwest::blocking::Client::new();

    let server = common::Server::spawn(dir.path(), &[]);
    let page: serde_json::Value = client.get(server.url("/jobs/job-r/candidates?page_size=100")).send().unwrap().json().unwrap();
    let items = page["items"].as_array().unwrap();
    let dists: Vec<f64> = items.iter().map(|c| c["distance"].as_f64().unwrap()).collect();
    let tau = dists[30];
    let (status, body) = put(
        &client,
        server.url("/jobs/job-r/threshold"),
        serde_json::json!({"tau": tau, "delta": dists[40] - tau, "version": 0}),
    );
    assert_eq!(status, 200, "{body}");
    let mut version = body["version"].as_u64().unwrap();
    let pending: serde_json::Value =
        client.get(server.url("/jobs/job-r/candidates?filter=pending&page_size=100")).send().unwrap().json().unwrap();
    let pending: Vec<String> = pending["items"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap().to_string()).collect();
    assert!(pending.len() >= 4);

    // Acknowledged decisions, then SIGKILL.
    let mut acked = BTreeMap::new();
    for (i, cid) in pending.iter().enumerate().take(4) {
        let decision = if i % 2 == 0 { "expert_keep" } else { "expert_drop" };
        let (status, body) =
            put(&client, server.url(&format!("/jobs/job-r/candidates/{cid}/decision")), serde_json::json!({"decision": decision, "version": version}));
        assert_eq!(status, 200, "{body}");
        version = body["version"].as_u64().unwrap();
        acked.insert(cid.clone(), decision.to_string());
    }
    server.kill();

    let server = common::Server::spawn(dir.path(), &[]);
    let page: serde_json::Value = client.get(server.url("/jobs/job-r/candidates?page_size=100")).send().unwrap().json().unwrap();
    assert_eq!(page["version"].as_u64().unwrap(), version, "version lost across restart");
    let after: BTreeMap<String, String> = page["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["id"].as_str().unwrap().to_string(), c["decision"].as_str().unwrap().to_string()))
        .collect();
    for (cid, d) in &acked {
        assert_eq!(&after[cid], d, "decision on {cid} lost across restart");
    }

    // Two writers holding the same version: one wins, the other is told the
    // current version and succeeds on retry.
    let (c1, c2) = (&pending[4 % pending.len()], &pending[pending.len() - 1]);
    let seen = version;
    let (s1, b1) = put(&client, server.url(&format!("/jobs/job-r/candidates/{c1}/decision")), serde_json::json!({"decision": "expert_keep", "version": seen}));
    let (s2, b2) = put(&client, server.url(&format!("/jobs/job-r/candidates/{c2}/decision")), serde_json::json!({"decision": "expert_drop", "version": seen}));
    assert_eq!((s1, s2), (200, 409), "{b1} {b2}");
    assert_eq!(b2["code"], "conflict");
    assert_eq!(b2["current_version"].as_u64().unwrap(), seen + 1);
    let (s3, b3) = put(&client, server.url(&format!("/jobs/job-r/candidates/{c2}/decision")), serde_json::json!({"decision": "expert_drop", "version": b2["current_version"]}));
    assert_eq!(s3, 200, "{b3}");

    // Racing writers: exactly one success per version step, nothing lost.
    let version = b3["version"].as_u64().unwrap();
    let all_ids: Vec<String> = after.keys().cloned().collect();
    let racers: Vec<String> = all_ids.into_iter().filter(|id| !acked.contains_key(id) && id != c1 && id != c2).take(8).collect();
    let barrier = std::sync::Barrier::new(racers.len());
    let first_round: Vec<u16> = std::thread::scope(|s| {
        let handles: Vec<_> = racers
            .iter()
            .map(|cid| {
                let (client, barrier, url) = (&client, &barrier, server.url(&format!("/jobs/job-r/candidates/{cid}/decision")));
                s.spawn(move || {
                    barrier.wait();
                    let (status, mut body) = put(client, url.clone(), serde_json::json!({"decision": "expert_keep", "version": version}));
                    let first = status;
                    let mut status = status;
                    while status == 409 {
                        let current = body["current_version"].clone();
                        (status, body) = put(client, url.clone(), serde_json::json!({"decision": "expert_keep", "version": current}));
                    }
                    assert_eq!(status, 200, "{body}");
                    first
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(first_round.iter().filter(|s| **s == 200).count(), 1, "{first_round:?}");
    let stats: serde_json::Value = client.get(server.url("/jobs/job-r/stats")).send().unwrap().json().unwrap();
    assert_eq!(stats["version"].as_u64().unwrap(), version + racers.len() as u64);
    let page: serde_json::Value = client.get(server.url("/jobs/job-r/candidates?page_size=100")).send().unwrap().json().unwrap();
    for item in page["items"].as_array().unwrap() {
        if racers.iter().any(|r| r == item["id"].as_str().unwrap()) {
            assert_eq!(item["decision"], "expert_keep");
        }
    }
    format!("{} acknowledged decisions survived SIGKILL; stale writes got 409; {} racers, one winner per version", acked.len(), racers.len())
}
