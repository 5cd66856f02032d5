//! Epoch loop: sampling, augmentation, forward/backward, optimizer step,
//! metrics log and checkpointing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use super::loss::LossConfig;
use super::optim::{OptimConfig, Optimizer};
use super::sampler::{epoch_batches, BatchMode};
use crate::arch::{build_model, Ctx, NetworkSpec, OSNetModel};
use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{derive_rng, make_batch, AugmentPolicy, Augmenter, ImageSet};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Scalar, Tensor};

const SAMPLER_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total epochs; a resumed run continues up to this count.
    pub epochs: usize,
    pub batch: BatchMode,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
    /// Run every kernel on a single thread.
    pub deterministic: bool,
    /// For the first `fixbase_epochs` epochs only parameters whose name
    /// starts with one of `open_layers` are trained.
    pub fixbase_epochs: usize,
    pub open_layers: Vec<String>,
    /// Written after every completed epoch.
    pub checkpoint: Option<PathBuf>,
    /// `epoch,lr,loss,acc` lines, rewritten after every epoch.
    pub log: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(epochs: usize, height: usize) -> Self {
        TrainConfig {
            epochs,
            batch: BatchMode::Random { batch_size: 64 },
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentPolicy::standard(height),
            seed: 0,
            deterministic: false,
            fixbase_epochs: 0,
            open_layers: vec!["classifier".to_string()],
            checkpoint: None,
            log: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// Zero-based epoch index; `lr` is the schedule value at this index.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:e},{:.6},{:.4}", self.epoch, self.lr, self.loss, self.acc)
    }
}

impl EpochLog {
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::format(format!("invalid metrics line '{}'", line));
        let parts: Vec<&str> = line.split(',').collect();
        let [e, lr, loss, acc] = parts[..] else { return Err(bad()) };
        Ok(EpochLog {
            epoch: e.parse().map_err(|_| bad())?,
            lr: lr.parse().map_err(|_| bad())?,
            loss: loss.parse().map_err(|_| bad())?,
            acc: acc.parse().map_err(|_| bad())?,
        })
    }
}

pub const LOG_HEADER: &str = "epoch,lr,loss,acc";

/// Metrics log text with a header line.
pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = format!("{}\n", LOG_HEADER);
    for e in log {
        s.push_str(&format!("{}\n", e));
    }
    s
}

/// Model, parameters, optimizer state and progress of one training run.
pub struct Trainer<T: Scalar> {
    pub model: OSNetModel,
    pub store: ParamStore<T>,
    pub optimizer: Optimizer<T>,
    /// Next epoch to run.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialized from `seed`.
    pub fn new(spec: &NetworkSpec, optim: OptimConfig, seed: u64) -> Result<Self> {
        let (model, store) = build_model::<T>(spec, seed)?;
        Ok(Trainer {
            model,
            store,
            optimizer: Optimizer::new(optim)?,
            epoch: 0,
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint<T>, optim: OptimConfig) -> Result<Self> {
        let model = ckpt.model()?;
        let mut optimizer = Optimizer::new(optim)?;
        optimizer.import(&ckpt.store, &ckpt.extra)?;
        let epoch = match ckpt.meta.get("train.epoch") {
            Some(e) => e
                .parse()
                .map_err(|_| Error::format(format!("invalid train.epoch '{}'", e)))?,
            None => 0,
        };
        let log = match ckpt.meta.get("train.log") {
            Some(text) if !text.is_empty() => text.split(';').map(EpochLog::parse).collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        Ok(Trainer {
            model,
            store: ckpt.store.clone(),
            optimizer,
            epoch,
            log,
        })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint<T> {
        let mut meta = BTreeMap::new();
        meta.insert("train.epoch".to_string(), self.epoch.to_string());
        meta.insert("train.seed".to_string(), cfg.seed.to_string());
        meta.insert("train.optimizer".to_string(), cfg.optim.kind.name().to_string());
        meta.insert("train.schedule".to_string(), cfg.optim.schedule.to_string());
        meta.insert(
            "train.log".to_string(),
            self.log.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(";"),
        );
        Checkpoint {
            spec: self.model.spec.clone(),
            store: self.store.clone(),
            meta,
            extra: self.optimizer.export(&self.store),
        }
    }

    /// Runs epochs `self.epoch..cfg.epochs`. A non-finite loss aborts the run;
    /// the checkpoint on disk then still holds the last completed epoch.
    pub fn run(&mut self, data: &ImageSet, cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.deterministic {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .map_err(|e| Error::invalid(e.to_string()))?;
            pool.install(|| self.run_epochs(data, cfg))
        } else {
            self.run_epochs(data, cfg)
        }
    }

    fn run_epochs(&mut self, data: &ImageSet, cfg: &TrainConfig) -> Result<()> {
        let labels = data.index.class_labels();
        let classes = self.model.spec.num_classes;
        if classes != labels.len() {
            return Err(Error::invalid(format!(
                "model has {} classes but the training set has {} identities",
                classes,
                labels.len()
            )));
        }
        let targets: Vec<usize> = data.index.records.iter().map(|r| labels[&r.pid]).collect();
        while self.epoch < cfg.epochs {
            let e = self.epoch;
            let frozen = e < cfg.fixbase_epochs;
            if frozen {
                self.store.set_trainable("", false);
                for prefix in &cfg.open_layers {
                    self.store.set_trainable(prefix, true);
                }
            } else {
                self.store.set_trainable("", true);
            }
            let entry = self.train_epoch(data, &targets, cfg, e)?;
            if let Some((_, p)) = self.store.iter().find(|(_, p)| !p.value.all_finite()) {
                return Err(Error::NonFinite(format!("parameter {} after epoch {}", p.name, e)));
            }
            self.log.push(entry);
            self.epoch += 1;
            if let Some(path) = &cfg.log {
                std::fs::write(path, format_log(&self.log))?;
            }
            if let Some(path) = &cfg.checkpoint {
                self.checkpoint(cfg).save(path)?;
            }
        }
        self.store.set_trainable("", true);
        Ok(())
    }

    fn train_epoch(&mut self, data: &ImageSet, targets: &[usize], cfg: &TrainConfig, e: usize) -> Result<EpochLog> {
        let spec = &self.model.spec;
        let (h, w) = (spec.input_height, spec.input_width);
        let lr = cfg.optim.lr_at(e);
        let mut rng = derive_rng(cfg.seed, &[SAMPLER_STREAM, e as u64]);
        let (batches, _) = epoch_batches(&data.index, cfg.batch, &mut rng)?;
        let mut augmenter = Augmenter::new(cfg.augment.clone())?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let mut aug_rng = derive_rng(cfg.seed, &[AUGMENT_STREAM, e as u64, b as u64]);
            let x: Tensor<T> = make_batch(data, idx, h, w, &mut augmenter, &mut aug_rng)?.cast();
            let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let mut binding = Binding::new();
            let mut ctx = Ctx::new(&mut tape, &mut binding, &mut self.store, true);
            let xv = ctx.tape.constant(x);
            let out = self.model.forward(&mut ctx, xv)?;
            let logits = out
                .logits
                .ok_or_else(|| Error::invalid("training needs a classifier (num_classes > 0)"))?;
            let loss = ctx.tape.combined_loss(logits, out.features, &y, &cfg.loss)?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss {} at epoch {} batch {}", value, e, b)));
            }
            correct += count_correct(tape.value(logits), &y);
            let grads = tape.backward(loss)?;
            self.store.zero_grads();
            self.store.store_grads(&binding, &tape, &grads);
            self.optimizer.step(&mut self.store, lr)?;
            loss_sum += value * idx.len() as f64;
            seen += idx.len();
        }
        if seen == 0 {
            return Err(Error::invalid("epoch produced no batches"));
        }
        Ok(EpochLog {
            epoch: e,
            lr,
            loss: loss_sum / seen as f64,
            acc: correct as f64 / seen as f64,
        })
    }
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(y)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            best == t
        })
        .count()
}
