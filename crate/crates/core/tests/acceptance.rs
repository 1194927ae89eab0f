//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! `MALBYTE_ACCEPTANCE_ONLY=1,4` runs a subset. Criterion 7 needs
//! `MALBYTE_KAGGLE_DIR` (a directory holding `train/` and `trainLabels.csv`);
//! `MALBYTE_KAGGLE_FULL=1` adds the full-corpus run to the subsample run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use malbyte::ingest::{list_sample_files, read_sample, scan_corpus, UnknownBytePolicy};
use malbyte::models::gradcheck::{check_architecture, toy_config};
use malbyte::models::{build_model, predict_proba};
use malbyte::nn::gradcheck::harness::{self, Corrupted};
use malbyte::nn::gradcheck::{grad_check, GradCheckConfig};
use malbyte::nn::Tensor;
use malbyte::resample::{resample, resample_linear_values, Interpolation};
use malbyte::sampling::{
    stratified_fold_indices, stratified_subsample, ClassDraw, DefaultBatches, RebalancedBatches, SamplerMode,
};
use malbyte::synthetic::{generate, write_corpus, SyntheticSpec};
use malbyte::train_eval::{
    compute_metrics, cross_validate, predict_rows, train_fold, Control, CvOptions, Dataset, EvalReport, Selection,
    TrainConfig,
};
use malbyte::{Architecture, Family, ModelConfig, INPUT_LEN, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

// Pinned thresholds.
const REFERENCE_PARAMS: [(Architecture, usize); 3] = [
    (Architecture::Cnn, 1_842_069),
    (Architecture::CnnUniLstm, 155_669),
    (Architecture::CnnBiLstm, 268_949),
];
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const RESAMPLER_TRIALS: usize = 1000;
const SAMPLER_BATCHES: usize = 10_000;
const SAMPLER_BATCH_SIZE: usize = 64;
const CLASS_FREQUENCY_TOLERANCE: f64 = 0.02;
const CHI_SQUARE_QUANTILE: f64 = 0.999;
/// Class counts of the public training corpus, in class-index order.
const CORPUS_COUNTS: [usize; NUM_CLASSES] = [1541, 2478, 2942, 475, 42, 751, 398, 1228, 1013];
const OVERFIT_PER_CLASS: usize = 10;
const OVERFIT_MAX_EPOCHS: usize = 200;
const E2E_SEEDS: u64 = 5;
/// Fixed budget per run, chosen from learning curves of both samplers on
/// this corpus.
const E2E_EPOCHS: usize = 25;
const E2E_HELD_OUT_FOLDS: usize = 2;
const E2E_MIN_ACCURACY: f64 = 0.95;
const MINORITY_CLASS: usize = 4;
const KAGGLE_SUBSAMPLE: f64 = 0.2;
const KAGGLE_SUBSAMPLE_MIN_ACCURACY: f64 = 0.95;
const KAGGLE_FULL_MIN_ACCURACY: f64 = 0.97;
const KAGGLE_FULL_MIN_MACRO_F1: f64 = 0.94;
const LATENCY_PER_CLASS: usize = 56;
const MAX_SECONDS_PER_FILE: f64 = 0.1;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Verdict;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    /// Cores the budget was stated for; budgets scale up on smaller machines.
    reference_cores: Option<usize>,
    check: Check,
}

fn fail_on<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, Verdict> {
    r.map_err(|e| Verdict::Fail(format!("error: {e}")))
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

macro_rules! attempt {
    ($e:expr) => {
        match fail_on($e) {
            Ok(v) => v,
            Err(v) => return v,
        }
    };
}

fn parameter_counts() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (arch, expected) in REFERENCE_PARAMS {
        let params = attempt!(build_model::<f32>(&ModelConfig::reference(arch)));
        let n = params.count_params();
        ok &= n == expected;
        parts.push(format!("{arch} {n} (expected {expected})"));
    }
    verdict(ok, parts.join(", "))
}

fn gradient_checks() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for mut layer in harness::all_layers(100) {
        let report = attempt!(grad_check(layer.as_mut(), GradCheckConfig::default()));
        worst = worst.max(report.max_relative_error());
        if !report.passed() {
            failures.push(report.to_string());
        }
    }
    for arch in Architecture::ALL {
        let report = attempt!(check_architecture(arch, GRADCHECK_TOLERANCE));
        worst = worst.max(report.max_relative_error());
        if !report.passed() {
            failures.push(format!("{arch}: {report}"));
        }
    }
    let mut corrupted = Corrupted {
        inner: harness::Dense::new(5),
        offset: 1e-2,
    };
    let control = attempt!(grad_check(&mut corrupted, GradCheckConfig::default()));
    let detail = format!(
        "worst relative error {worst:.2e} (tolerance {GRADCHECK_TOLERANCE:.0e}); corrupted control error {:.2e}",
        control.max_relative_error()
    );
    if !failures.is_empty() {
        return Verdict::Fail(format!("{detail}; {}", failures.join("; ")));
    }
    verdict(!control.passed(), detail)
}

fn resampler_properties() -> Verdict {
    let exact = attempt!(resample_linear_values(&[0.0, 255.0], 4));
    if exact != [0.0, 85.0, 170.0, 255.0] {
        return Verdict::Fail(format!("[0, 255] -> 4 gave {exact:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = Vec::new();
    for trial in 0..RESAMPLER_TRIALS {
        let n = if trial % 10 == 0 { rng.random_range(1..=20) } else { rng.random_range(1..=30_000) };
        let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0..=255u8) as f64).collect();
        let target = rng.random_range(1..=12_000);

        let identity = attempt!(resample_linear_values(&x[..n.min(INPUT_LEN)], n.min(INPUT_LEN)));
        if identity[..] != x[..n.min(INPUT_LEN)] {
            violations.push(format!("identity, n={n}"));
        }
        let y = attempt!(resample_linear_values(&x, target));
        let (lo, hi) = x.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        if y.len() != target || y.iter().any(|&v| v < lo || v > hi) {
            violations.push(format!("bounds, n={n} target={target}"));
        }
        x.sort_by(f64::total_cmp);
        let y = attempt!(resample_linear_values(&x, target));
        if y.windows(2).any(|w| w[1] < w[0]) {
            violations.push(format!("monotonicity, n={n} target={target}"));
        }
        let c = x[0];
        let y = attempt!(resample_linear_values(&vec![c; n], target));
        if y.iter().any(|&v| v != c) {
            violations.push(format!("constant, n={n} target={target}"));
        }
    }
    // The full-length identity is checked once more at exactly the model input length.
    let x: Vec<f64> = (0..INPUT_LEN).map(|_| rng.random_range(0..=255u8) as f64).collect();
    if attempt!(resample_linear_values(&x, INPUT_LEN)) != x {
        violations.push(format!("identity at {INPUT_LEN}"));
    }
    verdict(
        violations.is_empty(),
        format!("{RESAMPLER_TRIALS} random inputs, {} violations {:?}", violations.len(), violations.iter().take(3).collect::<Vec<_>>()),
    )
}

fn corpus_labels() -> Vec<Family> {
    CORPUS_COUNTS
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(Family::from_index(c).unwrap(), n))
        .collect()
}

fn sampler_statistics() -> Verdict {
    let labels = corpus_labels();
    let train: Vec<usize> = (0..labels.len()).collect();
    let gen = attempt!(RebalancedBatches::from_labels(
        &train,
        &labels,
        NUM_CLASSES,
        SAMPLER_BATCH_SIZE,
        17,
        ClassDraw::PerSlot
    ));
    let mut counts = [0usize; NUM_CLASSES];
    let mut batches = 0;
    let mut epoch = 0;
    while batches < SAMPLER_BATCHES {
        for b in gen.epoch(epoch).into_iter().take(SAMPLER_BATCHES - batches) {
            for i in b.indices {
                counts[labels[i].index()] += 1;
            }
            batches += 1;
        }
        epoch += 1;
    }
    let total: usize = counts.iter().sum();
    let expected = total as f64 / NUM_CLASSES as f64;
    let worst_dev = counts
        .iter()
        .map(|&c| (c as f64 / total as f64 - 1.0 / NUM_CLASSES as f64).abs())
        .fold(0.0, f64::max);
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((NUM_CLASSES - 1) as f64).unwrap().inverse_cdf(CHI_SQUARE_QUANTILE);

    let default = attempt!(DefaultBatches::new(train.clone(), SAMPLER_BATCH_SIZE, 17));
    let permutations = (0..5).all(|e| {
        let mut seen: Vec<usize> = default.epoch(e).into_iter().flat_map(|b| b.indices).collect();
        seen.sort_unstable();
        seen == train
    });

    let mut folds_ok = true;
    let mut simda = Vec::new();
    for seed in 0..5 {
        let folds = attempt!(stratified_fold_indices(&labels, 5, seed));
        let mut table = [[0usize; 5]; NUM_CLASSES];
        for (i, &f) in folds.iter().enumerate() {
            table[labels[i].index()][f] += 1;
        }
        for row in &table {
            folds_ok &= row.iter().max().unwrap() - row.iter().min().unwrap() <= 1;
        }
        let mut s = table[MINORITY_CLASS].to_vec();
        s.sort_unstable_by(|a, b| b.cmp(a));
        folds_ok &= s == [9, 9, 8, 8, 8];
        simda = s;
    }
    let ok = worst_dev <= CLASS_FREQUENCY_TOLERANCE && chi2 <= critical && permutations && folds_ok;
    verdict(
        ok,
        format!(
            "max |freq - 1/9| {worst_dev:.4} (limit {CLASS_FREQUENCY_TOLERANCE}), chi2 {chi2:.2} vs {critical:.2}, \
             default epochs are permutations: {permutations}, folds balanced: {folds_ok} (Simda {simda:?})"
        ),
    )
}

fn synthetic_dataset(spec: &SyntheticSpec) -> malbyte::Result<Dataset> {
    Dataset::from_bytes(INPUT_LEN, Interpolation::Linear, &generate(spec)?)
}

fn accuracy(probs: &[f64], data: &Dataset, indices: &[usize]) -> f64 {
    let hits = probs
        .chunks_exact(NUM_CLASSES)
        .zip(indices)
        .filter(|(row, &i)| {
            let pred = (0..NUM_CLASSES).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            pred == data.labels()[i].index()
        })
        .count();
    hits as f64 / indices.len() as f64
}

fn overfit_sanity() -> Verdict {
    let data = attempt!(synthetic_dataset(&SyntheticSpec::balanced(OVERFIT_PER_CLASS, 5)));
    let all: Vec<usize> = (0..data.len()).collect();
    let model = ModelConfig::reference(Architecture::Cnn);
    let cfg = TrainConfig {
        epochs: OVERFIT_MAX_EPOCHS,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut reached = None;
    let mut last = 0.0;
    attempt!(train_fold(&model, &data, &all, &[], &cfg, Selection::FinalEpoch, &mut |rec, predictor| {
        last = accuracy(&predictor.predict(&data, &all)?, &data, &all);
        if last == 1.0 {
            reached = Some(rec.epoch);
            return Ok(Control::Stop);
        }
        Ok(Control::Continue)
    }));
    match reached {
        Some(e) => Verdict::Pass(format!("{} samples fit perfectly after {e} epochs", data.len())),
        None => Verdict::Fail(format!("training accuracy {last:.4} after {OVERFIT_MAX_EPOCHS} epochs")),
    }
}

struct E2eRun {
    seed: u64,
    sampler: SamplerMode,
    report: EvalReport,
}

fn e2e_run(data: &Dataset, seed: u64, sampler: SamplerMode) -> malbyte::Result<E2eRun> {
    let folds = stratified_fold_indices(data.labels(), E2E_HELD_OUT_FOLDS, seed)?;
    let (held, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| folds[i] == 0);
    let model = ModelConfig {
        seed,
        ..ModelConfig::reference(Architecture::CnnBiLstm)
    };
    let cfg = TrainConfig {
        epochs: E2E_EPOCHS,
        sampler,
        seed,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let outcome = train_fold(&model, data, &train, &[], &cfg, Selection::FinalEpoch, &mut |_, _| Ok(Control::Continue))?;
    let probs = predict_rows(&outcome.params, data, &held)?;
    let labels: Vec<usize> = held.iter().map(|&i| data.labels()[i].index()).collect();
    let report = compute_metrics(&probs, &labels, NUM_CLASSES)?;
    eprintln!(
        "  seed {seed} {sampler:9} accuracy {:.4} minority F1 {:.4} ({:.0}s)",
        report.micro_accuracy,
        report.per_class_f1[MINORITY_CLASS],
        t.elapsed().as_secs_f64()
    );
    Ok(E2eRun { seed, sampler, report })
}

fn synthetic_end_to_end() -> Verdict {
    let mut runs = Vec::new();
    for seed in 0..E2E_SEEDS {
        let data = attempt!(synthetic_dataset(&SyntheticSpec::imbalanced(seed)));
        let pair: Vec<malbyte::Result<E2eRun>> = [SamplerMode::Rebalance, SamplerMode::Default]
            .into_par_iter()
            .map(|s| e2e_run(&data, seed, s))
            .collect();
        for r in pair {
            runs.push(attempt!(r));
        }
    }
    let mean = |sampler: SamplerMode, f: &dyn Fn(&EvalReport) -> f64| {
        let xs: Vec<f64> = runs.iter().filter(|r| r.sampler == sampler).map(|r| f(&r.report)).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let acc = |r: &EvalReport| r.micro_accuracy;
    let minority = |r: &EvalReport| r.per_class_f1[MINORITY_CLASS];
    let reb_acc = mean(SamplerMode::Rebalance, &acc);
    let worst = runs
        .iter()
        .filter(|r| r.sampler == SamplerMode::Rebalance)
        .map(|r| (r.report.micro_accuracy, r.seed))
        .fold((f64::MAX, 0), |a, b| if b.0 < a.0 { b } else { a });
    let (reb_f1, def_f1) = (mean(SamplerMode::Rebalance, &minority), mean(SamplerMode::Default, &minority));
    verdict(
        reb_acc >= E2E_MIN_ACCURACY && reb_f1 >= def_f1,
        format!(
            "rebalance held-out accuracy mean {reb_acc:.4} (min {:.4} at seed {}, need {E2E_MIN_ACCURACY}), \
             default {:.4}; minority F1 rebalance {reb_f1:.4} vs default {def_f1:.4}",
            worst.0,
            worst.1,
            mean(SamplerMode::Default, &acc)
        ),
    )
}

fn kaggle_cv(dir: &Path, fraction: f64) -> malbyte::Result<EvalReport> {
    let mut entries = scan_corpus(&dir.join("train"), &dir.join("trainLabels.csv"))?;
    if fraction < 1.0 {
        let labels: Vec<Family> = entries.iter().map(|e| e.label).collect();
        let keep = stratified_subsample(&labels, fraction, 0)?;
        entries = keep.into_iter().map(|i| entries[i].clone()).collect();
    }
    let data = Dataset::from_corpus(&entries, INPUT_LEN, Interpolation::Linear, UnknownBytePolicy::Zero, None)?;
    let cfg = TrainConfig {
        sampler: SamplerMode::Rebalance,
        ..TrainConfig::default()
    };
    let model = ModelConfig::reference(Architecture::CnnBiLstm);
    Ok(cross_validate(&data, &model, &cfg, &CvOptions::default())?.report)
}

fn kaggle_corpus() -> Verdict {
    let Some(dir) = std::env::var_os("MALBYTE_KAGGLE_DIR").map(PathBuf::from) else {
        return Verdict::Skip("MALBYTE_KAGGLE_DIR not set; the public corpus is required".into());
    };
    let sub = attempt!(kaggle_cv(&dir, KAGGLE_SUBSAMPLE));
    let mut ok = sub.micro_accuracy >= KAGGLE_SUBSAMPLE_MIN_ACCURACY;
    let mut detail = format!(
        "subsample {KAGGLE_SUBSAMPLE}: accuracy {:.4} (need {KAGGLE_SUBSAMPLE_MIN_ACCURACY}), macro F1 {:.4}",
        sub.micro_accuracy, sub.macro_f1
    );
    if std::env::var("MALBYTE_KAGGLE_FULL").is_ok_and(|v| v == "1") {
        let full = attempt!(kaggle_cv(&dir, 1.0));
        ok &= full.micro_accuracy >= KAGGLE_FULL_MIN_ACCURACY && full.macro_f1 >= KAGGLE_FULL_MIN_MACRO_F1;
        detail.push_str(&format!(
            "; full: accuracy {:.4} (need {KAGGLE_FULL_MIN_ACCURACY}), macro F1 {:.4} (need {KAGGLE_FULL_MIN_MACRO_F1})",
            full.micro_accuracy, full.macro_f1
        ));
    } else {
        detail.push_str("; full-corpus run skipped (set MALBYTE_KAGGLE_FULL=1)");
    }
    verdict(ok, detail)
}

fn latency_seconds_per_file(dir: &Path) -> malbyte::Result<(usize, f64)> {
    let params = build_model::<f32>(&ModelConfig::reference(Architecture::CnnBiLstm))?;
    let files: Vec<PathBuf> = list_sample_files(dir)?.into_values().collect();
    let t = Instant::now();
    let rows: Vec<Vec<f32>> = files
        .par_iter()
        .map(|p| {
            let seq = read_sample(p, UnknownBytePolicy::Zero)?;
            Ok(resample(&seq, INPUT_LEN, Interpolation::Linear)?.values().to_vec())
        })
        .collect::<malbyte::Result<_>>()?;
    for chunk in rows.chunks(64) {
        let batch = Tensor::new(vec![chunk.len(), INPUT_LEN], chunk.concat())?;
        predict_proba(&params, &batch)?;
    }
    Ok((files.len(), t.elapsed().as_secs_f64() / files.len() as f64))
}

fn determinism_report() -> malbyte::Result<(String, Vec<u64>)> {
    let spec = SyntheticSpec {
        min_len: 300,
        max_len: 5000,
        ..SyntheticSpec::balanced(4, 21)
    };
    let model = toy_config(Architecture::CnnBiLstm, 21);
    let data = Dataset::from_bytes(model.input_len, Interpolation::Linear, &generate(&spec)?)?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        sampler: SamplerMode::Rebalance,
        seed: 21,
        ..TrainConfig::default()
    };
    let opts = CvOptions {
        num_folds: 3,
        ..CvOptions::default()
    };
    let r = cross_validate(&data, &model, &cfg, &opts)?;
    Ok((r.report.to_key_values(), r.probabilities.iter().map(|p| p.to_bits()).collect()))
}

fn latency_and_determinism() -> Verdict {
    let dir = attempt!(tempfile::tempdir());
    attempt!(write_corpus(&SyntheticSpec::balanced(LATENCY_PER_CLASS, 8), dir.path()));
    let (n, per_file) = attempt!(latency_seconds_per_file(dir.path()));

    let pool = attempt!(rayon::ThreadPoolBuilder::new().num_threads(1).build());
    let a = attempt!(pool.install(determinism_report));
    let b = attempt!(pool.install(determinism_report));
    let identical = a == b;
    verdict(
        per_file <= MAX_SECONDS_PER_FILE && identical,
        format!(
            "{n} files, preprocess + predict {per_file:.4} s/file (limit {MAX_SECONDS_PER_FILE}); \
             repeated single-thread runs bit-identical: {identical}"
        ),
    )
}

fn selected() -> Option<Vec<u32>> {
    let v = std::env::var("MALBYTE_ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "parameter counts", budget: Duration::from_secs(1), reference_cores: None, check: parameter_counts },
        Criterion { id: 2, name: "gradient checks", budget: Duration::from_secs(300), reference_cores: None, check: gradient_checks },
        Criterion { id: 3, name: "resampler properties", budget: Duration::from_secs(10), reference_cores: None, check: resampler_properties },
        Criterion { id: 4, name: "sampler statistics", budget: Duration::from_secs(60), reference_cores: None, check: sampler_statistics },
        Criterion { id: 5, name: "overfit sanity", budget: Duration::from_secs(300), reference_cores: Some(4), check: overfit_sanity },
        Criterion { id: 6, name: "synthetic end-to-end", budget: Duration::from_secs(1800), reference_cores: Some(8), check: synthetic_end_to_end },
        Criterion { id: 7, name: "public corpus", budget: Duration::from_secs(7200), reference_cores: Some(8), check: kaggle_corpus },
        Criterion { id: 8, name: "latency and determinism", budget: Duration::from_secs(600), reference_cores: None, check: latency_and_determinism },
    ];
    let only = selected();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut failed = 0;
    for c in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let budget = match c.reference_cores {
            Some(r) if r > cores => c.budget * (r / cores) as u32,
            _ => c.budget,
        };
        let t = Instant::now();
        let v = (c.check)();
        let elapsed = t.elapsed();
        let timing = format!("{:.1}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64());
        let (tag, detail) = match v {
            Verdict::Pass(d) if elapsed <= budget => ("PASS", d),
            Verdict::Pass(d) => ("FAIL", format!("{d}; over time budget")),
            Verdict::Fail(d) => ("FAIL", d),
            Verdict::Skip(d) => ("SKIP", d),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} {} {}: {detail} ({timing})", c.id, c.name);
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
