use std::path::{Path, PathBuf};

use log::{info, warn};

use super::adam::{clip_global_norm, AdamState};
use super::checkpoint::{atomic_write, load_checkpoint, save_checkpoint};
use super::metrics::{accuracy_f1, metrics_csv, MetricsRecord};
use crate::config::RunConfig;
use crate::data::{batch_order, make_batch, DatasetIndex, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Batch, Dtcn};
use crate::rng::{streams, Rng};
use crate::text::Vocab;

pub const METRICS_FILE: &str = "metrics.csv";
pub const BATCHES_FILE: &str = "batches.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.txt";

/// Tokenized and decoded splits of one dataset directory.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub vocab: Vocab,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitData {
    /// Loads every split, building the vocabulary from the training texts.
    pub fn load(dir: &Path, config: &RunConfig) -> Result<Self> {
        let index = DatasetIndex::read(dir)?;
        if index.manifest.num_classes != config.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, config has num_classes = {}",
                index.manifest.num_classes, config.num_classes
            )));
        }
        let vocab = index.build_vocab(config.vocab_size)?;
        Self::load_with_vocab(&index, vocab, config)
    }

    pub fn load_with_vocab(index: &DatasetIndex, vocab: Vocab, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            train: index.load_split(Split::Train, &vocab, config)?,
            val: index.load_split(Split::Val, &vocab, config)?,
            test: index.load_split(Split::Test, &vocab, config)?,
            vocab,
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Loss components of one training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_contrast: f64,
}

pub const BATCHES_HEADER: &str = "epoch,batch,loss_total,loss_cls,loss_contrast";

/// Batch losses at full (round-trip) precision.
pub fn batches_csv(logs: &[BatchLog]) -> String {
    let mut s = format!("{BATCHES_HEADER}\n");
    for b in logs {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            b.epoch, b.batch, b.loss_total, b.loss_cls, b.loss_contrast
        ));
    }
    s
}

/// Best validation score seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub best_val_f1: f64,
    pub best_epoch: usize,
    pub patience: usize,
    pub checkpoint: Option<PathBuf>,
}

impl EarlyStopState {
    pub fn new(patience: usize, checkpoint: Option<PathBuf>) -> Self {
        Self {
            best_val_f1: f64::NEG_INFINITY,
            best_epoch: 0,
            patience,
            checkpoint,
        }
    }

    /// Records `f1` for `epoch`; true on a strict improvement.
    pub fn update(&mut self, epoch: usize, f1: f64) -> bool {
        if f1 > self.best_val_f1 {
            self.best_val_f1 = f1;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch - self.best_epoch >= self.patience
    }
}

/// What a training observer sees after each backward pass, before clipping
/// and the optimizer update.
pub struct StepInfo<'a> {
    pub step: u64,
    pub log: BatchLog,
    pub batch: &'a Batch,
    pub model: &'a Dtcn,
    pub grads: &'a [Option<Vec<f64>>],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Train and val rows per epoch, then the test row.
    pub records: Vec<MetricsRecord>,
    pub batches: Vec<BatchLog>,
    pub early_stop: EarlyStopState,
    pub best: Dtcn,
    pub last: Dtcn,
}

impl TrainOutcome {
    pub fn test(&self) -> &MetricsRecord {
        self.records.last().expect("test row is always present")
    }

    pub fn val_record(&self, epoch: usize) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.split == Split::Val && r.epoch == epoch)
    }
}

struct Pass {
    preds: Vec<usize>,
    labels: Vec<usize>,
    total: f64,
    cls: f64,
    contrast: f64,
    batches: usize,
}

impl Pass {
    fn new() -> Self {
        Self {
            preds: Vec::new(),
            labels: Vec::new(),
            total: 0.0,
            cls: 0.0,
            contrast: 0.0,
            batches: 0,
        }
    }

    fn add(&mut self, log: &BatchLog, preds: Vec<usize>, batch: &Batch) {
        self.total += log.loss_total;
        self.cls += log.loss_cls;
        self.contrast += log.loss_contrast;
        self.batches += 1;
        self.preds.extend(preds);
        self.labels.extend_from_slice(&batch.labels);
    }

    fn record(&self, epoch: usize, split: Split, config: &RunConfig) -> Result<MetricsRecord> {
        if self.batches == 0 {
            return Err(Error::Data(format!("{} split is empty", split.as_str())));
        }
        let (accuracy, macro_f1) = accuracy_f1(&self.preds, &self.labels, config.num_classes, config.f1_average)?;
        let n = self.batches as f64;
        Ok(MetricsRecord {
            epoch,
            split,
            loss_total: self.total / n,
            loss_cls: self.cls / n,
            loss_contrast: self.contrast / n,
            accuracy,
            macro_f1,
        })
    }
}

fn diverged(epoch: usize, batch_no: usize, batch: &Batch, what: &str) -> Error {
    Error::Diverged(format!(
        "epoch {epoch}, batch {batch_no}: {what}; batch ids: {}",
        batch.sample_ids.join(",")
    ))
}

/// Eval-mode pass over `samples` in order.
pub fn evaluate(model: &Dtcn, samples: &[Sample], epoch: usize, split: Split) -> Result<MetricsRecord> {
    let config = &model.config;
    let mut pass = Pass::new();
    for (i, idx) in batch_order(samples.len(), config.batch_size, None).iter().enumerate() {
        let batch = make_batch(&idx.iter().map(|&j| &samples[j]).collect::<Vec<_>>(), config.patch_size)?;
        let mut ctx = model.ctx(Rng::new(0), false);
        let out = model.forward(&mut ctx, &batch).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(epoch, i, &batch, &e.to_string()),
            e => e,
        })?;
        let log = BatchLog {
            epoch,
            batch: i,
            loss_total: ctx.tape.value(out.loss.total).item(),
            loss_cls: ctx.tape.value(out.loss.cls).item(),
            loss_contrast: ctx.tape.value(out.loss.contrast).item(),
        };
        let preds = argmax_rows(ctx.tape.value(out.logits).data(), config.num_classes);
        pass.add(&log, preds, &batch);
    }
    pass.record(epoch, split, config)
}

/// Loads a checkpoint plus the `vocab.txt` saved beside it and evaluates
/// one split of the dataset at `data_dir`.
pub fn evaluate_checkpoint(checkpoint: &Path, data_dir: &Path, split: Split) -> Result<MetricsRecord> {
    let (config, store) = load_checkpoint(checkpoint)?;
    let model = Dtcn::with_params(&config, store)?;
    let vocab_path = checkpoint.with_file_name(VOCAB_FILE);
    let vocab = Vocab::load(&vocab_path)?;
    if vocab.len() > config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "{} has {} tokens but the checkpoint embeds {}",
            vocab_path.display(),
            vocab.len(),
            config.vocab_size
        )));
    }
    let index = DatasetIndex::read(data_dir)?;
    if index.manifest.num_classes != config.num_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} classes, dataset has {}",
            config.num_classes, index.manifest.num_classes
        )));
    }
    let samples = index.load_split(split, &vocab, &config).map_err(|e| match e {
        Error::Data(m) | Error::Config(m) => Error::Checkpoint(format!("checkpoint does not match data: {m}")),
        e => e,
    })?;
    evaluate(&model, &samples, 0, split)
}

pub fn train(config: &RunConfig, data: &SplitData, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_observed(config, data, run_dir, &mut |_| {})
}

/// Full training run. With `run_dir`, writes the config, vocabulary,
/// `metrics.csv` (after every epoch), `batches.csv` and both checkpoints.
pub fn train_observed(
    config: &RunConfig,
    data: &SplitData,
    run_dir: Option<&Path>,
    observer: &mut dyn FnMut(&StepInfo<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.vocab.len() > config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but vocab_size is {}",
            data.vocab.len(),
            config.vocab_size
        )));
    }
    for (split, samples) in [(Split::Val, &data.val), (Split::Test, &data.test)] {
        if samples.is_empty() {
            return Err(Error::Data(format!("{} split is empty", split.as_str())));
        }
    }
    if config.epochs > 0 && data.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let best_path = run_dir.map(|d| d.join(BEST_CHECKPOINT));
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        atomic_write(&dir.join(CONFIG_FILE), config.to_text().as_bytes())?;
        data.vocab.save(&dir.join(VOCAB_FILE))?;
    }

    let mut model = Dtcn::new(config)?;
    let mut best = model.clone();
    let mut adam = AdamState::new(&model.store, config.lr);
    let mut stop = EarlyStopState::new(config.patience, best_path.clone());
    let mut records = Vec::new();
    let mut logs = Vec::new();
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        let mut pass = Pass::new();
        for (i, idx) in batch_order(data.train.len(), config.batch_size, Some((config.seed, epoch as u64)))
            .iter()
            .enumerate()
        {
            let batch = make_batch(&idx.iter().map(|&j| &data.train[j]).collect::<Vec<_>>(), config.patch_size)?;
            let mut ctx = model.ctx(Rng::substream(config.seed, streams::DROPOUT, step), true);
            let as_diverged = |e: Error| match e {
                Error::NonFinite { .. } => diverged(epoch, i, &batch, &e.to_string()),
                e => e,
            };
            let out = model.forward(&mut ctx, &batch).map_err(as_diverged)?;
            let log = BatchLog {
                epoch,
                batch: i,
                loss_total: ctx.tape.value(out.loss.total).item(),
                loss_cls: ctx.tape.value(out.loss.cls).item(),
                loss_contrast: ctx.tape.value(out.loss.contrast).item(),
            };
            if !log.loss_total.is_finite() {
                return Err(diverged(epoch, i, &batch, "non-finite loss"));
            }
            ctx.tape.backward(out.loss.total).map_err(as_diverged)?;
            let mut grads = ctx.param_grads();
            observer(&StepInfo {
                step,
                log,
                batch: &batch,
                model: &model,
                grads: &grads,
            });
            if let Some(max) = config.clip_norm {
                let norm = clip_global_norm(&mut grads, max);
                if !norm.is_finite() {
                    return Err(diverged(epoch, i, &batch, "non-finite gradient norm"));
                }
            }
            adam.step(&mut model.store, &grads)?;
            let preds = argmax_rows(ctx.tape.value(out.logits).data(), config.num_classes);
            pass.add(&log, preds, &batch);
            logs.push(log);
            step += 1;
        }
        let train_rec = pass.record(epoch, Split::Train, config)?;
        let val_rec = evaluate(&model, &data.val, epoch, Split::Val)?;
        info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4} f1 {:.4}",
            train_rec.loss_total, train_rec.accuracy, val_rec.loss_total, val_rec.accuracy, val_rec.macro_f1
        );
        let improved = stop.update(epoch, val_rec.macro_f1);
        records.push(train_rec);
        records.push(val_rec);
        if improved {
            best = model.clone();
            if let Some(p) = &best_path {
                save_checkpoint(p, config, &best.store)?;
            }
        }
        if let Some(dir) = run_dir {
            atomic_write(&dir.join(METRICS_FILE), metrics_csv(&records).as_bytes())?;
        }
        if stop.should_stop(epoch) {
            info!("early stop after epoch {epoch}; best epoch {}", stop.best_epoch);
            break;
        }
    }
    if config.epochs == 0 {
        warn!("epochs = 0: reporting test metrics of the initial parameters");
    }

    let test = evaluate(&best, &data.test, stop.best_epoch, Split::Test)?;
    info!("test (epoch {}): acc {:.4} f1 {:.4}", stop.best_epoch, test.accuracy, test.macro_f1);
    records.push(test);
    if let Some(dir) = run_dir {
        if config.epochs == 0 || best_path.as_ref().is_some_and(|p| !p.exists()) {
            save_checkpoint(&dir.join(BEST_CHECKPOINT), config, &best.store)?;
        }
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), config, &model.store)?;
        atomic_write(&dir.join(METRICS_FILE), metrics_csv(&records).as_bytes())?;
        atomic_write(&dir.join(BATCHES_FILE), batches_csv(&logs).as_bytes())?;
    }
    Ok(TrainOutcome {
        records,
        batches: logs,
        early_stop: stop,
        best,
        last: model,
    })
}
