use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use malbyte::family::{family_legend, Family, NUM_CLASSES};
use malbyte::ingest::{list_sample_files, read_sample, sample_id_from_path, scan_corpus, CorpusStats, Identified};
use malbyte::models::{load_model, predict_proba, save_model, Architecture, ModelParams};
use malbyte::nn::Tensor;
use malbyte::resample::{export_pgm, resample, ResampledSequence, SequenceCache};
use malbyte::sampling::{stratified_subsample, SamplerMode};
use malbyte::train_eval::{
    comparison_table, cross_validate as run_cross_validation, train_final, ComparisonRow, Control, CvOptions, Dataset, EvalReport,
    HistoryCsv, TrainConfig,
};
use rayon::prelude::*;

use crate::config::RunConfig;

/// Exit code 2 for usage errors, 1 for processing failures.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Processing(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Processing(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Processing(e) => e,
        }
    }
}

impl From<malbyte::Error> for Failure {
    fn from(e: malbyte::Error) -> Self {
        match e {
            malbyte::Error::Config(_) | malbyte::Error::Argument(_) => Failure::Usage(e.into()),
            _ => Failure::Processing(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Processing(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn existing(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    let p = path.clone().ok_or_else(|| usage(format!("{flag} is required")))?;
    if !p.exists() {
        return Err(usage(format!("{flag}: {} does not exist", p.display())));
    }
    Ok(p)
}

fn required(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    path.clone().ok_or_else(|| usage(format!("{flag} is required")))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Processing)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Processing)
}

fn open_cache(cfg: &RunConfig) -> Result<Option<SequenceCache>, Failure> {
    let input_len = cfg.model.resolve().input_len;
    cfg.paths
        .cache_dir
        .as_ref()
        .map(|d| SequenceCache::open(d, input_len, cfg.preprocess.interpolation))
        .transpose()
        .map_err(Failure::from)
}

enum FileOutcome {
    Cached,
    Processed(Duration),
    Failed(String),
}

pub fn preprocess(cfg: &RunConfig) -> CmdResult {
    let data_dir = existing(&cfg.paths.data_dir, "--data-dir")?;
    required(&cfg.paths.cache_dir, "--cache-dir")?;
    let cache = open_cache(cfg)?.expect("cache dir checked");
    let files: Vec<(String, PathBuf)> = list_sample_files(&data_dir)?.into_iter().collect();
    let started = Instant::now();
    let outcomes: Vec<FileOutcome> = files
        .par_iter()
        .map(|(id, path)| {
            if cache.contains(id) {
                return FileOutcome::Cached;
            }
            let t = Instant::now();
            match read_sample(path, cfg.preprocess.unknown_bytes).and_then(|s| cache.get_or_insert(&s)) {
                Ok(_) => FileOutcome::Processed(t.elapsed()),
                Err(e) => FileOutcome::Failed(e.to_string()),
            }
        })
        .collect();
    let wall = started.elapsed();

    let mut report = String::from("sample_id,status,seconds,message\n");
    let (mut processed, mut cached, mut failed, mut busy) = (0, 0, Vec::new(), Duration::ZERO);
    for ((id, _), o) in files.iter().zip(&outcomes) {
        match o {
            FileOutcome::Cached => {
                cached += 1;
                report.push_str(&format!("{id},cached,,\n"));
            }
            FileOutcome::Processed(d) => {
                processed += 1;
                busy += *d;
                report.push_str(&format!("{id},processed,{:.6},\n", d.as_secs_f64()));
            }
            FileOutcome::Failed(msg) => {
                failed.push((id.clone(), msg.clone()));
                report.push_str(&format!("{id},failed,,\"{}\"\n", msg.replace('"', "'")));
            }
        }
    }
    let out_dir = cfg.paths.output_dir.clone().unwrap_or_else(|| cache.dir().to_path_buf());
    create_dir(&out_dir)?;
    write_file(&out_dir.join("preprocess_report.csv"), report)?;
    cfg.write(&out_dir.join("effective_config.toml"))?;

    let per_file = if processed > 0 { busy.as_secs_f64() / processed as f64 } else { 0.0 };
    println!("files       {}", files.len());
    println!("processed   {processed}");
    println!("cached      {cached}");
    println!("failed      {}", failed.len());
    println!("avg s/file  {per_file:.4}");
    println!("wall s      {:.2}", wall.as_secs_f64());
    for (id, msg) in &failed {
        eprintln!("failed: {id}: {msg}");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Processing(anyhow!("{} file(s) failed to preprocess", failed.len())))
    }
}

pub fn stats(cfg: &RunConfig, bucket_kb: usize) -> CmdResult {
    let data_dir = existing(&cfg.paths.data_dir, "--data-dir")?;
    let labels = existing(&cfg.paths.labels, "--labels")?;
    let stats = if list_sample_files(&data_dir)?.is_empty() {
        CorpusStats::from_lengths(std::iter::empty(), bucket_kb)
    } else {
        let entries = scan_corpus(&data_dir, &labels)?;
        let lengths: Vec<(Family, usize)> = entries
            .par_iter()
            .map(|e| read_sample(&e.path, cfg.preprocess.unknown_bytes).map(|s| (e.label, s.original_length())))
            .collect::<malbyte::Result<_>>()?;
        CorpusStats::from_lengths(lengths, bucket_kb)
    };
    let counts = stats.counts_array();
    let mut text = String::from("class,family,count\n");
    for f in Family::all() {
        text.push_str(&format!("{},{},{}\n", f.label_number(), f.name(), counts[f.index()]));
    }
    text.push_str(&format!("total,,{}\n", stats.total()));
    let mut hist = String::from("bucket_start_kb,bucket_end_kb,count\n");
    for (&b, &n) in &stats.size_histogram {
        hist.push_str(&format!("{},{},{n}\n", b * stats.bucket_kb, (b + 1) * stats.bucket_kb));
    }
    print!("{text}\n{hist}");
    if let Some(dir) = &cfg.paths.output_dir {
        create_dir(dir)?;
        write_file(&dir.join("class_counts.csv"), &text)?;
        write_file(&dir.join("size_histogram.csv"), &hist)?;
        cfg.write(&dir.join("effective_config.toml"))?;
    }
    Ok(())
}

/// Loads the labeled corpus as resampled rows, applying the configured
/// stratified subsample.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let data_dir = existing(&cfg.paths.data_dir, "--data-dir")?;
    let labels = existing(&cfg.paths.labels, "--labels")?;
    let cache = open_cache(cfg)?;
    let mut entries = scan_corpus(&data_dir, &labels)?;
    if cfg.cv.subsample < 1.0 {
        let fams: Vec<Family> = entries.iter().map(|e| e.label).collect();
        let keep = stratified_subsample(&fams, cfg.cv.subsample, cfg.train.seed)?;
        entries = keep.into_iter().map(|i| entries[i].clone()).collect();
    }
    if entries.is_empty() {
        return Err(usage("the corpus is empty"));
    }
    let t = Instant::now();
    let data = Dataset::from_corpus(
        &entries,
        cfg.model.resolve().input_len,
        cfg.preprocess.interpolation,
        cfg.preprocess.unknown_bytes,
        cache.as_ref(),
    )?;
    log::info!("loaded {} samples in {:.1}s", data.len(), t.elapsed().as_secs_f64());
    Ok(data)
}

fn oof_csv(data: &Dataset, probs: &[f64], folds: &[usize]) -> String {
    let mut s = String::from("sample_id,fold,true_class,predicted_class");
    for c in 1..=NUM_CLASSES {
        s.push_str(&format!(",p{c}"));
    }
    s.push('\n');
    for (i, row) in probs.chunks_exact(NUM_CLASSES).enumerate() {
        let pred = argmax(row);
        s.push_str(&format!("{},{},{},{}", data.ids()[i], folds[i], data.labels()[i].label_number(), pred + 1));
        for p in row {
            s.push_str(&format!(",{p:.8}"));
        }
        s.push('\n');
    }
    s
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn cross_validate(cfg: &RunConfig) -> CmdResult {
    let out_dir = required(&cfg.paths.output_dir, "--output-dir")?;
    cfg.model.resolve().validate()?;
    cfg.train.validate()?;
    let data = load_dataset(cfg)?;
    create_dir(&out_dir)?;
    cfg.write(&out_dir.join("effective_config.toml"))?;

    let runs: Vec<(Architecture, SamplerMode)> = if cfg.cv.compare {
        Architecture::ALL
            .into_iter()
            .flat_map(|a| [SamplerMode::Default, SamplerMode::Rebalance].map(|s| (a, s)))
            .collect()
    } else {
        vec![(cfg.model.architecture, cfg.train.sampler)]
    };
    let mut reports: Vec<(Architecture, SamplerMode, EvalReport)> = Vec::new();
    for (arch, sampler) in runs {
        let model = cfg.model.resolve_for(arch);
        let train = TrainConfig {
            sampler,
            ..cfg.train.clone()
        };
        let run_dir = out_dir.join(format!("{arch}_{sampler}"));
        create_dir(&run_dir)?;
        let opts = CvOptions {
            num_folds: cfg.cv.folds,
            history_dir: Some(run_dir.clone()),
            parallel: cfg.cv.parallel_folds,
        };
        let t = Instant::now();
        let result = cross_validate_run(&data, &model, &train, &opts)?;
        let title = format!(
            "{arch} / {sampler} sampler, {}-fold cross-validation, {} samples, {:.0}s",
            cfg.cv.folds,
            data.len(),
            t.elapsed().as_secs_f64()
        );
        let text = result.report.to_text(&title);
        write_file(&run_dir.join("report.txt"), &text)?;
        write_file(&run_dir.join("report.toml"), result.report.to_key_values())?;
        write_file(&run_dir.join("oof_predictions.csv"), oof_csv(&data, &result.probabilities, &result.folds))?;
        println!("{text}");
        reports.push((arch, sampler, result.report));
    }
    let rows: Vec<ComparisonRow<'_>> = reports
        .iter()
        .map(|(a, s, r)| ComparisonRow {
            architecture: *a,
            sampler: *s,
            report: r,
        })
        .collect();
    let table = comparison_table(&rows);
    write_file(&out_dir.join("comparison.csv"), &table)?;
    println!("{table}");
    Ok(())
}

fn cross_validate_run(
    data: &Dataset,
    model: &malbyte::ModelConfig,
    train: &TrainConfig,
    opts: &CvOptions,
) -> Result<malbyte::train_eval::CvResult, Failure> {
    run_cross_validation(data, model, train, opts).map_err(|e| match e {
        malbyte::Error::Config(_) | malbyte::Error::Argument(_) => Failure::Usage(e.into()),
        other => Failure::Processing(other.into()),
    })
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    let out_dir = required(&cfg.paths.output_dir, "--output-dir")?;
    let model_path = cfg.paths.model.clone().unwrap_or_else(|| out_dir.join("model.bcnn"));
    let model = cfg.model.resolve();
    model.validate()?;
    cfg.train.validate()?;
    let data = load_dataset(cfg)?;
    create_dir(&out_dir)?;
    cfg.write(&out_dir.join("effective_config.toml"))?;

    let mut history = HistoryCsv::create(&out_dir.join("history.csv"))?;
    let t = Instant::now();
    let outcome = train_final(&data, &model, &cfg.train, &mut |rec, _| {
        log::info!("{}", rec.csv_line());
        history.append(rec)?;
        Ok(Control::Continue)
    })?;
    save_model(&outcome.params, &model_path)?;
    let best = outcome.history[outcome.best_epoch - 1];
    let summary = format!(
        "architecture = \"{}\"\nsampler = \"{}\"\ntrain_samples = {}\nval_samples = {}\nbest_epoch = {}\nbest_val_loss = {:?}\nbest_val_acc = {:?}\nseconds = {:.1}\nmodel = {:?}\n",
        model.architecture,
        cfg.train.sampler,
        outcome.train_indices.len(),
        outcome.val_indices.len(),
        outcome.best_epoch,
        outcome.best_val_loss,
        best.val_acc.unwrap_or(f64::NAN),
        t.elapsed().as_secs_f64(),
        model_path.display().to_string()
    );
    write_file(&out_dir.join("train_summary.toml"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(list_sample_files(p)?.into_values());
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

struct Prediction {
    sample_id: String,
    result: Result<Vec<f64>, String>,
}

struct Timing {
    convert: Duration,
    predict: Duration,
}

fn load_existing_model(cfg: &RunConfig) -> Result<ModelParams<f32>, Failure> {
    let path = existing(&cfg.paths.model, "--model")?;
    load_model(&path).map_err(|e| Failure::Processing(anyhow!("{}: {e}", path.display())))
}

/// Converts and classifies every file, keeping input order.
fn classify_files(cfg: &RunConfig, params: &ModelParams<f32>, files: &[PathBuf]) -> Result<(Vec<Prediction>, Timing), Failure> {
    let len = params.config.input_len;
    let t = Instant::now();
    let converted: Vec<Result<ResampledSequence, String>> = files
        .par_iter()
        .map(|p| {
            read_sample(p, cfg.preprocess.unknown_bytes)
                .and_then(|s| resample(&s, len, cfg.preprocess.interpolation))
                .map_err(|e| e.to_string())
        })
        .collect();
    let convert = t.elapsed();

    let t = Instant::now();
    let ok: Vec<&ResampledSequence> = converted.iter().filter_map(|r| r.as_ref().ok()).collect();
    let mut probs: Vec<Vec<f64>> = Vec::with_capacity(ok.len());
    for chunk in ok.chunks(256) {
        let data: Vec<f32> = chunk.iter().flat_map(|s| s.values().iter().copied()).collect();
        let batch = Tensor::new(vec![chunk.len(), len], data)?;
        let p = predict_proba(params, &batch)?;
        probs.extend(p.data().chunks_exact(params.config.num_classes).map(|r| r.iter().map(|&v| v as f64).collect()));
    }
    let predict = t.elapsed();

    let mut probs = probs.into_iter();
    let rows = files
        .iter()
        .zip(converted)
        .map(|(path, c)| match c {
            Ok(seq) => Prediction {
                sample_id: seq.sample_id().to_string(),
                result: Ok(probs.next().expect("one row per converted file")),
            },
            Err(msg) => Prediction {
                sample_id: sample_id_from_path(path),
                result: Err(msg),
            },
        })
        .collect();
    Ok((rows, Timing { convert, predict }))
}

fn submission_csv(rows: &[Prediction]) -> String {
    let mut s = String::from("Id");
    for c in 1..=NUM_CLASSES {
        s.push_str(&format!(",Prediction{c}"));
    }
    s.push('\n');
    for r in rows {
        if let Ok(p) = &r.result {
            s.push_str(&r.sample_id);
            for v in p {
                s.push_str(&format!(",{v:.8}"));
            }
            s.push('\n');
        }
    }
    s
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn predict(cfg: &RunConfig, inputs: &[PathBuf], out: Option<&Path>, submission: Option<&Path>) -> CmdResult {
    let params = load_existing_model(cfg)?;
    let files = expand_inputs(inputs)?;
    let (rows, timing) = classify_files(cfg, &params, &files)?;

    let mut text = String::from("sample_id,family");
    for c in 1..=NUM_CLASSES {
        text.push_str(&format!(",p{c}"));
    }
    text.push('\n');
    let mut errors = 0;
    for r in &rows {
        match &r.result {
            Ok(p) => {
                let family = Family::from_index(argmax(p)).map(|f| f.name()).unwrap_or("?");
                text.push_str(&format!("{},{family}", r.sample_id));
                for v in p {
                    text.push_str(&format!(",{v:.8}"));
                }
                text.push('\n');
            }
            Err(msg) => {
                errors += 1;
                text.push_str(&format!("{},ERROR,{}\n", r.sample_id, quote(msg)));
            }
        }
    }
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_file(path, &text)?;
            cfg.write(&path.with_extension("config.toml"))?;
        }
        None => {
            std::io::stdout()
                .write_all(text.as_bytes())
                .context("writing predictions")?;
        }
    }
    if let Some(path) = submission {
        write_file(path, submission_csv(&rows))?;
    }
    let n = files.len().max(1) as f64;
    let (c, p) = (timing.convert.as_secs_f64(), timing.predict.as_secs_f64());
    eprintln!(
        "files {}  errors {errors}  convert {:.4} s/file  predict {:.4} s/file  end-to-end {:.4} s/file",
        files.len(),
        c / n,
        p / n,
        (c + p) / n
    );
    eprintln!("{}", family_legend());
    if errors > 0 {
        return Err(Failure::Processing(anyhow!("{errors} input(s) could not be classified")));
    }
    Ok(())
}

pub fn visualize(cfg: &RunConfig, input: &Path, width: usize, out: Option<&Path>) -> CmdResult {
    if !input.exists() {
        return Err(usage(format!("{} does not exist", input.display())));
    }
    let seq = read_sample(input, cfg.preprocess.unknown_bytes)?;
    let resampled = resample(&seq, cfg.model.resolve().input_len, cfg.preprocess.interpolation)?;
    let image = export_pgm(&resampled, width)?;
    let path = out.map_or_else(|| PathBuf::from(format!("{}.pgm", seq.sample_id())), Path::to_path_buf);
    write_file(&path, image)?;
    println!("{}", path.display());
    Ok(())
}

pub fn export_submission(cfg: &RunConfig, out: &Path) -> CmdResult {
    let params = load_existing_model(cfg)?;
    let data_dir = existing(&cfg.paths.data_dir, "--data-dir")?;
    let files: Vec<PathBuf> = list_sample_files(&data_dir)?.into_values().collect();
    let (rows, _) = classify_files(cfg, &params, &files)?;
    write_file(out, submission_csv(&rows))?;
    let failed: Vec<&Prediction> = rows.iter().filter(|r| r.result.is_err()).collect();
    for r in &failed {
        if let Err(msg) = &r.result {
            eprintln!("failed: {}: {msg}", r.sample_id);
        }
    }
    println!("{} rows written to {}", rows.len() - failed.len(), out.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Processing(anyhow!("{} file(s) could not be classified", failed.len())))
    }
}
