//! Training loop, cross-validation, final-model training and metrics.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Family, FAMILY_NAMES};
use crate::ingest::{read_sample, ByteSequence, CorpusEntry, Identified, LabeledSample, UnknownBytePolicy};
use crate::models::{argmax_rows, build_model, predict_proba, Architecture, ModelConfig, ModelParams, Tape};
use crate::nn::{AdamConfig, AdamState, DropoutMode, FlushDenormals, Scalar, Tensor};
use crate::resample::{resample, Interpolation, ResampledSequence, SequenceCache};
use crate::sampling::{
    derive_seed, stratified_fold_indices, BatchGenerator, ClassDraw, SamplerMode, STREAM_DROPOUT,
    STREAM_FINAL_SPLIT, STREAM_FOLD_INIT, STREAM_FOLD_TRAIN,
};

/// Probability clipping bound used by the log-loss.
pub const LOG_LOSS_EPS: f64 = 1e-15;

/// Rows per inference pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Argument(format!("unknown precision `{s}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sampler: SamplerMode,
    pub class_draw: ClassDraw,
    pub adam: AdamConfig,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            sampler: SamplerMode::Default,
            class_draw: ClassDraw::PerSlot,
            adam: AdamConfig::default(),
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Resampled inputs held contiguously, one row of `input_len` values per
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_len: usize,
    values: Vec<f32>,
    labels: Vec<Family>,
    ids: Vec<String>,
}

impl Dataset {
    pub fn new(input_len: usize) -> Self {
        Dataset {
            input_len,
            values: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn push(&mut self, seq: &ResampledSequence, label: Family) -> Result<()> {
        if seq.len() != self.input_len {
            return Err(Error::Shape(format!(
                "sample `{}` has {} values, dataset rows have {}",
                seq.sample_id(),
                seq.len(),
                self.input_len
            )));
        }
        self.values.extend_from_slice(seq.values());
        self.labels.push(label);
        self.ids.push(seq.sample_id().to_string());
        Ok(())
    }

    pub fn from_sequences(input_len: usize, samples: &[LabeledSample<ResampledSequence>]) -> Result<Self> {
        let mut data = Dataset::new(input_len);
        for s in samples {
            data.push(&s.sequence, s.label)?;
        }
        Ok(data)
    }

    /// Resamples raw samples (in parallel) and stacks them in input order.
    pub fn from_bytes(input_len: usize, mode: Interpolation, samples: &[LabeledSample<ByteSequence>]) -> Result<Self> {
        let rows: Vec<ResampledSequence> = samples
            .par_iter()
            .map(|s| resample(&s.sequence, input_len, mode))
            .collect::<Result<_>>()?;
        let mut data = Dataset::new(input_len);
        for (row, s) in rows.iter().zip(samples) {
            data.push(row, s.label)?;
        }
        Ok(data)
    }

    /// Reads and resamples every entry (in parallel), one file in memory per
    /// worker at a time. With a cache, records are reused or written.
    pub fn from_corpus(
        entries: &[CorpusEntry],
        input_len: usize,
        mode: Interpolation,
        policy: UnknownBytePolicy,
        cache: Option<&SequenceCache>,
    ) -> Result<Self> {
        let rows: Vec<ResampledSequence> = entries
            .par_iter()
            .map(|e| {
                if let Some(hit) = cache.map(|c| c.load(&e.sample_id)).transpose()?.flatten() {
                    return Ok(hit);
                }
                let seq = read_sample(&e.path, policy)?;
                match cache {
                    Some(c) => c.get_or_insert(&seq),
                    None => resample(&seq, input_len, mode),
                }
            })
            .collect::<Result<_>>()?;
        let mut data = Dataset::new(input_len);
        for (row, e) in rows.iter().zip(entries) {
            data.push(row, e.label)?;
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn labels(&self) -> &[Family] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.input_len..(i + 1) * self.input_len]
    }

    /// `[indices.len() x input_len]` batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.input_len);
        for &i in indices {
            data.extend(self.row(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(vec![indices.len(), self.input_len], data).expect("batch of at least one row")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.input_len);
        for &i in indices {
            out.values.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
            out.ids.push(self.ids[i].clone());
        }
        out
    }

    fn label_indices(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i].index()).collect()
    }
}

/// One line of the training history. Training loss and accuracy are running
/// means over the epoch's batches (dropout active); validation figures come
/// from a separate inference pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{},{}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            opt(self.val_loss),
            opt(self.val_acc)
        )
    }
}

/// History log flushed after every epoch, so an aborted run keeps what it
/// recorded.
pub struct HistoryCsv {
    out: BufWriter<File>,
    path: PathBuf,
}

impl HistoryCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut h = HistoryCsv {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        h.write_line(HISTORY_HEADER)?;
        Ok(h)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, rec: &EpochRecord) -> Result<()> {
        self.write_line(&rec.csv_line())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Which weights a training run returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    FinalEpoch,
    /// Snapshot of the epoch with the lowest validation log-loss (earliest on
    /// ties).
    BestValidation,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were returned.
    pub selected_epoch: usize,
}

/// Trains one model on `train` and tracks `val` after every epoch.
/// `on_epoch` sees each record and the current weights as they are produced
/// and may stop the run early.
pub fn train_fold(
    model: &ModelConfig,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    selection: Selection,
    on_epoch: &mut dyn FnMut(&EpochRecord, &dyn Predictor) -> Result<Control>,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if data.input_len() != model.input_len {
        return Err(Error::Shape(format!(
            "dataset rows have {} values, model expects {}",
            data.input_len(),
            model.input_len
        )));
    }
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut seen = vec![false; data.len()];
    for &i in train {
        if i >= data.len() {
            return Err(Error::Argument(format!("training index {i} out of range")));
        }
        seen[i] = true;
    }
    if let Some(&i) = val.iter().find(|&&i| i >= data.len() || seen[i]) {
        return Err(Error::Argument(format!(
            "validation index {i} is out of range or also in the training set"
        )));
    }
    if selection == Selection::BestValidation && val.is_empty() {
        return Err(Error::Config("best-epoch selection needs a validation set".into()));
    }
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(model, data, train, val, cfg, selection, on_epoch),
        Precision::F64 => train_impl::<f64>(model, data, train, val, cfg, selection, on_epoch),
    }
}

fn train_impl<T: Scalar>(
    model: &ModelConfig,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    selection: Selection,
    on_epoch: &mut dyn FnMut(&EpochRecord, &dyn Predictor) -> Result<Control>,
) -> Result<TrainOutcome> {
    let _fp = FlushDenormals::new();
    let generator = BatchGenerator::new(
        cfg.sampler,
        cfg.class_draw,
        train,
        data.labels(),
        model.num_classes,
        cfg.batch_size,
        cfg.seed,
    )?;
    let mut params = build_model::<T>(model)?;
    let mut adam = AdamState::new(cfg.adam, params.tensors().into_iter().map(|(_, t)| t));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DROPOUT, epoch as u64));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, spec) in generator.epoch(epoch).iter().enumerate() {
            let x = data.batch::<T>(&spec.indices);
            let y = data.label_indices(&spec.indices);
            let mut tape = Tape::new(&params);
            let out = tape.forward_loss(&x, &y, DropoutMode::Train, &mut rng)?;
            let total = out.total().as_f64();
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b,
                    loss: total,
                });
            }
            let grads = tape.backward()?;
            drop(tape);
            let grad_refs: Vec<&Tensor<T>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut params.tensors_mut(), &grad_refs)?;

            loss_sum += out.data_loss.as_f64() * y.len() as f64;
            correct += argmax_rows(&out.probabilities).iter().zip(&y).filter(|(p, t)| p == t).count();
            seen += y.len();
        }

        let (val_loss, val_acc) = if val.is_empty() {
            (None, None)
        } else {
            let probs = predict_rows(&params, data, val)?;
            let labels = data.label_indices(val);
            (
                Some(log_loss(&probs, &labels, model.num_classes)),
                Some(accuracy(&probs, &labels, model.num_classes)),
            )
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss,
            val_acc,
        };
        history.push(rec);
        if selection == Selection::BestValidation {
            let v = val_loss.expect("validation set checked non-empty");
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch + 1, params.clone()));
            }
        }
        if on_epoch(&rec, &params)? == Control::Stop {
            break;
        }
    }

    let (params, selected_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, history.len()),
    };
    Ok(TrainOutcome {
        params: params.cast(),
        history,
        selected_epoch,
    })
}

/// Inference access to the weights of a run in progress.
pub trait Predictor {
    /// Flattened `[indices.len() x num_classes]` class probabilities.
    fn predict(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<f64>>;
}

impl<T: Scalar> Predictor for ModelParams<T> {
    fn predict(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
        predict_rows(self, data, indices)
    }
}

/// Flattened `[indices.len() x num_classes]` class probabilities.
pub fn predict_rows<T: Scalar>(params: &ModelParams<T>, data: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len() * params.config.num_classes);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let probs = predict_proba(params, &data.batch::<T>(chunk))?;
        out.extend(probs.data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

fn log_loss(probs: &[f64], labels: &[usize], classes: usize) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[i * classes + y].clamp(LOG_LOSS_EPS, 1.0 - LOG_LOSS_EPS).ln())
        .sum();
    total / labels.len() as f64
}

fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(probs: &[f64], labels: &[usize], classes: usize) -> f64 {
    let hits = probs
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| row_argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Classification metrics over a set of probability rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub micro_accuracy: f64,
    pub macro_f1: f64,
    pub avg_log_loss: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub per_class_support: Vec<usize>,
    /// Classes with neither instances nor predictions; their F1 is set to 0.
    pub degenerate_classes: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Per-fold training histories (empty for a plain metrics computation).
    #[serde(skip)]
    pub history: Vec<Vec<EpochRecord>>,
}

/// Metrics for flattened `[labels.len() x num_classes]` probability rows.
/// Predictions are the row argmax (ties to the lower class).
pub fn compute_metrics(probs: &[f64], labels: &[usize], num_classes: usize) -> Result<EvalReport> {
    if num_classes == 0 {
        return Err(Error::Argument("num_classes must be positive".into()));
    }
    if probs.len() != labels.len() * num_classes {
        return Err(Error::Argument(format!(
            "{} probability values for {} labels and {num_classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Argument(format!("label {y} outside 0..{num_classes}")));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (row, &y) in probs.chunks_exact(num_classes).zip(labels) {
        confusion[y][row_argmax(row)] += 1;
    }
    let mut precision = vec![0.0; num_classes];
    let mut recall = vec![0.0; num_classes];
    let mut f1 = vec![0.0; num_classes];
    let mut support = vec![0; num_classes];
    let mut degenerate = Vec::new();
    for c in 0..num_classes {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|r| r[c]).sum();
        support[c] = actual;
        if actual == 0 && predicted == 0 {
            degenerate.push(c);
            continue;
        }
        precision[c] = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        recall[c] = if actual > 0 { tp / actual as f64 } else { 0.0 };
        let (p, r) = (precision[c], recall[c]);
        f1[c] = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let trace: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        num_samples: labels.len(),
        micro_accuracy: trace as f64 / labels.len() as f64,
        macro_f1: f1.iter().sum::<f64>() / num_classes as f64,
        avg_log_loss: log_loss(probs, labels, num_classes),
        per_class_precision: precision,
        per_class_recall: recall,
        per_class_f1: f1,
        per_class_support: support,
        degenerate_classes: degenerate,
        confusion,
        history: Vec::new(),
    })
}

fn class_name(c: usize) -> String {
    FAMILY_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

impl EvalReport {
    /// Human-readable report: headline metrics, per-class table, confusion
    /// matrix and the class legend.
    pub fn to_text(&self, title: &str) -> String {
        let k = self.per_class_f1.len();
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "samples        {}", self.num_samples);
        let _ = writeln!(s, "accuracy       {:.4}", self.micro_accuracy);
        let _ = writeln!(s, "macro F1       {:.4}", self.macro_f1);
        let _ = writeln!(s, "avg log-loss   {:.6}", self.avg_log_loss);
        let _ = writeln!(s, "\nclass  {:<16} {:>9} {:>9} {:>9} {:>8}", "family", "precision", "recall", "f1", "support");
        for c in 0..k {
            let flag = if self.degenerate_classes.contains(&c) { "  (no instances, no predictions)" } else { "" };
            let _ = writeln!(
                s,
                "{:>5}  {:<16} {:>9.4} {:>9.4} {:>9.4} {:>8}{flag}",
                c + 1,
                class_name(c),
                self.per_class_precision[c],
                self.per_class_recall[c],
                self.per_class_f1[c],
                self.per_class_support[c]
            );
        }
        let _ = writeln!(s, "\nconfusion (rows = true class, columns = predicted)");
        let _ = write!(s, "     ");
        for c in 0..k {
            let _ = write!(s, "{:>7}", c + 1);
        }
        s.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{:>5}", c + 1);
            for v in row {
                let _ = write!(s, "{v:>7}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "\nlegend");
        for c in 0..k {
            let _ = writeln!(s, "  {} = {}", c + 1, class_name(c));
        }
        s
    }

    /// Machine-readable `key = value` lines (valid TOML).
    pub fn to_key_values(&self) -> String {
        fn floats(v: &[f64]) -> String {
            let items: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            format!("[{}]", items.join(", "))
        }
        fn ints(v: &[usize]) -> String {
            let items: Vec<String> = v.iter().map(usize::to_string).collect();
            format!("[{}]", items.join(", "))
        }
        let k = self.per_class_f1.len();
        let names: Vec<String> = (0..k).map(|c| format!("{:?}", class_name(c))).collect();
        let confusion: Vec<String> = self.confusion.iter().map(|r| ints(r)).collect();
        let mut s = String::new();
        let _ = writeln!(s, "num_samples = {}", self.num_samples);
        let _ = writeln!(s, "micro_accuracy = {:?}", self.micro_accuracy);
        let _ = writeln!(s, "macro_f1 = {:?}", self.macro_f1);
        let _ = writeln!(s, "avg_log_loss = {:?}", self.avg_log_loss);
        let _ = writeln!(s, "class_names = [{}]", names.join(", "));
        let _ = writeln!(s, "per_class_precision = {}", floats(&self.per_class_precision));
        let _ = writeln!(s, "per_class_recall = {}", floats(&self.per_class_recall));
        let _ = writeln!(s, "per_class_f1 = {}", floats(&self.per_class_f1));
        let _ = writeln!(s, "per_class_support = {}", ints(&self.per_class_support));
        let _ = writeln!(s, "degenerate_classes = {}", ints(&self.degenerate_classes));
        let _ = writeln!(s, "confusion = [{}]", confusion.join(", "));
        s
    }
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub num_folds: usize,
    /// Writes `fold<N>_history.csv` here when set.
    pub history_dir: Option<PathBuf>,
    /// Train folds concurrently. Results are identical either way.
    pub parallel: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            num_folds: 5,
            history_dir: None,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub report: EvalReport,
    /// Fold of each dataset row.
    pub folds: Vec<usize>,
    /// Out-of-fold probabilities, flattened, in dataset order.
    pub probabilities: Vec<f64>,
}

/// Stratified k-fold cross-validation. Each fold trains on the remaining
/// folds with final-epoch weights and predicts the held-out fold; metrics
/// are computed once over the pooled out-of-fold predictions.
pub fn cross_validate(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig, opts: &CvOptions) -> Result<CvResult> {
    if opts.num_folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    let folds = stratified_fold_indices(data.labels(), opts.num_folds, cfg.seed)?;
    let run = |f: usize| -> Result<(Vec<usize>, Vec<f64>, Vec<EpochRecord>)> {
        let (train, held): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| folds[i] != f);
        let fold_model = ModelConfig {
            seed: derive_seed(model.seed, STREAM_FOLD_INIT, f as u64),
            ..model.clone()
        };
        let fold_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, STREAM_FOLD_TRAIN, f as u64),
            ..cfg.clone()
        };
        let mut sink = match &opts.history_dir {
            Some(dir) => Some(HistoryCsv::create(&dir.join(format!("fold{f}_history.csv")))?),
            None => None,
        };
        let mut on_epoch = |rec: &EpochRecord, _: &dyn Predictor| {
            log::info!(
                "fold {f} epoch {}: train loss {:.4} acc {:.4}, held-out loss {:.4}",
                rec.epoch,
                rec.train_loss,
                rec.train_acc,
                rec.val_loss.unwrap_or(f64::NAN)
            );
            if let Some(s) = sink.as_mut() {
                s.append(rec)?;
            }
            Ok(Control::Continue)
        };
        let outcome = train_fold(&fold_model, data, &train, &held, &fold_cfg, Selection::FinalEpoch, &mut on_epoch)?;
        let probs = predict_rows(&outcome.params, data, &held)?;
        Ok((held, probs, outcome.history))
    };
    let wrap = |f: usize| run(f).map_err(|e| Error::Fold { fold: f, source: Box::new(e) });
    let results: Vec<_> = if opts.parallel {
        (0..opts.num_folds).into_par_iter().map(wrap).collect::<Result<_>>()?
    } else {
        (0..opts.num_folds).map(wrap).collect::<Result<_>>()?
    };

    let k = model.num_classes;
    let mut probabilities = vec![f64::NAN; data.len() * k];
    let mut history = Vec::with_capacity(results.len());
    for (held, probs, hist) in results {
        for (j, &i) in held.iter().enumerate() {
            probabilities[i * k..(i + 1) * k].copy_from_slice(&probs[j * k..(j + 1) * k]);
        }
        history.push(hist);
    }
    let labels: Vec<usize> = data.labels().iter().map(|l| l.index()).collect();
    let mut report = compute_metrics(&probabilities, &labels, k)?;
    report.history = history;
    Ok(CvResult {
        report,
        folds,
        probabilities,
    })
}

#[derive(Debug, Clone)]
pub struct FinalOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Trains on a stratified 90% split and returns the epoch snapshot with the
/// lowest log-loss on the remaining 10%.
pub fn train_final(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &dyn Predictor) -> Result<Control>,
) -> Result<FinalOutcome> {
    let folds = stratified_fold_indices(data.labels(), 10, derive_seed(cfg.seed, STREAM_FINAL_SPLIT, 0))?;
    let (train, val): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| folds[i] != 0);
    if val.is_empty() {
        return Err(Error::Config("corpus too small for a validation split".into()));
    }
    let outcome = train_fold(model, data, &train, &val, cfg, Selection::BestValidation, on_epoch)?;
    let best_val_loss = outcome.history[outcome.selected_epoch - 1].val_loss.expect("validation recorded");
    Ok(FinalOutcome {
        params: outcome.params,
        history: outcome.history,
        best_epoch: outcome.selected_epoch,
        best_val_loss,
        train_indices: train,
        val_indices: val,
    })
}

/// One row of a model/sampler comparison.
pub struct ComparisonRow<'a> {
    pub architecture: Architecture,
    pub sampler: SamplerMode,
    pub report: &'a EvalReport,
}

/// Comma-separated comparison of configurations, percentages to two places.
pub fn comparison_table(rows: &[ComparisonRow<'_>]) -> String {
    let mut s = String::from("model,sampler,accuracy_pct,macro_f1_pct,avg_log_loss\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.2},{:.2},{:.6}",
            r.architecture,
            r.sampler,
            100.0 * r.report.micro_accuracy,
            100.0 * r.report.macro_f1,
            r.report.avg_log_loss
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_hot(labels: &[usize], k: usize) -> Vec<f64> {
        let mut p = vec![0.0; labels.len() * k];
        for (i, &y) in labels.iter().enumerate() {
            p[i * k + y] = 1.0;
        }
        p
    }

    #[test]
    fn perfect_predictions() {
        let labels: Vec<usize> = (0..18).map(|i| i % 9).collect();
        let r = compute_metrics(&one_hot(&labels, 9), &labels, 9).unwrap();
        assert_eq!(r.micro_accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert!(r.per_class_f1.iter().all(|&f| f == 1.0));
        assert!(r.avg_log_loss < 1e-14);
    }

    #[test]
    fn two_class_hand_confusion() {
        // confusion [[1,1],[0,2]]
        let labels = [0, 0, 1, 1];
        let probs = [0.9, 0.1, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6];
        let r = compute_metrics(&probs, &labels, 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_relative_eq!(r.per_class_f1[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(r.per_class_f1[1], 0.8, epsilon = 1e-12);
        assert_relative_eq!(r.micro_accuracy, 0.75);
    }

    #[test]
    fn uniform_probabilities_give_ln9() {
        let labels = [0, 3, 8, 5];
        let probs = vec![1.0 / 9.0; 36];
        let r = compute_metrics(&probs, &labels, 9).unwrap();
        assert_relative_eq!(r.avg_log_loss, 9f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn absent_class_is_flagged_with_zero_f1() {
        let labels = [0, 1, 1];
        let r = compute_metrics(&one_hot(&labels, 3), &labels, 3).unwrap();
        assert_eq!(r.degenerate_classes, vec![2]);
        assert_eq!(r.per_class_f1[2], 0.0);
        assert_relative_eq!(r.macro_f1, 2.0 / 3.0);
    }

    #[test]
    fn zero_probability_is_clipped() {
        let labels = [1];
        let r = compute_metrics(&[1.0, 0.0], &labels, 2).unwrap();
        assert_relative_eq!(r.avg_log_loss, -(1e-15f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_argument_error() {
        assert!(matches!(compute_metrics(&[0.5; 17], &[0, 1], 9), Err(Error::Argument(_))));
    }

    #[test]
    fn key_values_parse_back() {
        let labels = [0, 0, 1, 1];
        let probs = [0.9, 0.1, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6];
        let r = compute_metrics(&probs, &labels, 2).unwrap();
        let kv = r.to_key_values();
        assert!(kv.contains("micro_accuracy = 0.75\n"));
        assert!(kv.contains("confusion = [[1, 1], [0, 2]]"));
        assert!(r.to_text("t").contains("1 = Ramnit"));
    }

    #[test]
    fn history_line_format() {
        let rec = EpochRecord {
            epoch: 3,
            train_loss: 0.5,
            train_acc: 0.75,
            val_loss: None,
            val_acc: Some(1.0),
        };
        assert_eq!(rec.csv_line(), "3,0.500000,0.750000,,1.000000");
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
