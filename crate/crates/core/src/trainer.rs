//! Training loop, validation metrics and ensemble orchestration.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Batch, ModelBundle, ModelConfig, Network};
use crate::nncore::{adam_step, log_softmax_nll, nll, AdamState, Mode, NdArray, PlateauScheduler};
use crate::rng;
use crate::sampling::{PatchDataset, FIRE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub shuffle_seed: u64,
    pub dropout_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 256,
            lr: 1e-3,
            patience: 10,
            factor: 0.1,
            min_lr: 1e-6,
            shuffle_seed: 0,
            dropout_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2 (batch normalization)".into()));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(
                "train.lr must be positive, train.min_lr non-negative and train.factor in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Recall, precision and F1 of the fire class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Fire iff `exp(logp[0]) > 0.5`; 0/0 ratios are 0.
pub fn compute_metrics<T: crate::nncore::Float>(log_probs: &NdArray<T>, labels: &[u8]) -> Result<Metrics> {
    if log_probs.ndim() != 2 || log_probs.shape()[1] != 2 || log_probs.shape()[0] != labels.len() {
        return Err(Error::shape(
            "compute_metrics",
            format!("log-probabilities {:?} with {} labels", log_probs.shape(), labels.len()),
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (i, &label) in labels.iter().enumerate() {
        let predicted = log_probs.item(i)[0].as_f64().exp() > 0.5;
        let actual = label == FIRE;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(metrics_from_counts(tp, fp, fn_))
}

pub fn metrics_from_counts(tp: usize, fp: usize, fn_: usize) -> Metrics {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let recall = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    Metrics { recall, precision, f1 }
}

/// Gathers the samples at `indices` into one batch.
pub fn load_batch(ds: &PatchDataset<'_>, indices: &[usize]) -> Result<(Batch<f32>, Vec<u8>)> {
    let (vl, pl) = (ds.values_len(), ds.plane_len());
    let mut values = vec![0.0f32; indices.len() * vl];
    let mut clc = vec![0u16; indices.len() * pl];
    for (k, &i) in indices.iter().enumerate() {
        ds.fill(i, &mut values[k * vl..(k + 1) * vl], &mut clc[k * pl..(k + 1) * pl])?;
    }
    let batch = Batch::new(
        indices.len(),
        ds.temporal_len,
        crate::datacube::N_CHANNELS,
        ds.patch_size,
        values,
        clc,
    )?;
    Ok((batch, indices.iter().map(|&i| ds.label(i)).collect()))
}

/// Eval-mode log-probabilities (`N x 2`) for the whole dataset in order.
pub fn predict(network: &Network<f32>, ds: &PatchDataset<'_>, batch_size: usize) -> Result<NdArray<f32>> {
    let mut out = Vec::with_capacity(ds.len() * 2);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (batch, _) = load_batch(ds, chunk)?;
        out.extend_from_slice(network.log_probs(&batch)?.data());
    }
    NdArray::from_vec(&[ds.len(), 2], out)
}

/// Splits a shuffled order into batches; a trailing batch of one sample is
/// folded into the previous batch so that batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Trains a private copy of `bundle` and returns the snapshot with the lowest
/// epoch-averaged validation loss (earliest on ties) plus the full history.
pub fn train(
    bundle: &ModelBundle,
    train_set: &PatchDataset<'_>,
    val_set: &PatchDataset<'_>,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainHistory)> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::BatchTooSmall(train_set.len()));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let mut network = bundle.network.clone();
    network.clear_cache();
    let mut adam = AdamState::new(cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.patience, cfg.factor, cfg.min_lr);
    let mut dropout = rng::stream(cfg.dropout_seed, "trainer/dropout");
    let val_labels = val_set.labels();
    let mut best: Option<(usize, f64, Network<f32>)> = None;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = adam.lr;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream_indexed(cfg.shuffle_seed, "trainer/shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let (batch, labels) = load_batch(train_set, idx)?;
            network.zero_grad();
            let logits = network.forward(&batch, Mode::Train, Some(&mut dropout))?;
            let (loss, grad) = log_softmax_nll(&logits, &labels)?;
            let loss = f64::from(loss);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss * idx.len() as f64;
            network.backward(&grad)?;
            adam_step(&mut network.named_params(), &mut adam)?;
        }
        network.clear_cache();
        let train_loss = loss_sum / train_set.len() as f64;

        let logp = predict(&network, val_set, cfg.batch_size)?;
        let val_loss = f64::from(nll(&logp, &val_labels)?);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        let m = compute_metrics(&logp, &val_labels)?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            recall: m.recall,
            precision: m.precision,
            f1: m.f1,
            lr,
        });
        log::info!(
            "epoch {epoch}: train {train_loss:.4} val {val_loss:.4} recall {:.3} precision {:.3} f1 {:.3} lr {lr:e}",
            m.recall,
            m.precision,
            m.f1
        );
        if best.as_ref().is_none_or(|(_, l, _)| val_loss < *l) {
            best = Some((epoch, val_loss, network.clone()));
        }
        adam.lr = sched.update(val_loss);
    }

    let (best_epoch, best_val_loss, network) = best.expect("at least one epoch");
    let mut provenance = bundle.provenance.clone();
    provenance.shuffle_seed = cfg.shuffle_seed;
    provenance.dropout_seed = cfg.dropout_seed;
    provenance.epochs_trained = cfg.epochs;
    provenance.best_epoch = Some(best_epoch);
    Ok((
        ModelBundle { network, provenance },
        TrainHistory {
            records,
            best_epoch,
            best_val_loss,
        },
    ))
}

/// Member init seeds plus the training configuration they share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: usize,
    /// Explicit per-member init seeds; derived from `base_seed` when empty.
    pub init_seeds: Vec<u64>,
    pub base_seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            members: 7,
            init_seeds: Vec::new(),
            base_seed: 0,
        }
    }
}

impl EnsembleSpec {
    pub fn seeds(&self) -> Result<Vec<u64>> {
        let seeds: Vec<u64> = if self.init_seeds.is_empty() {
            (0..self.members as u64)
                .map(|i| rng::derive_seed_indexed(self.base_seed, "ensemble/init", i))
                .collect()
        } else {
            self.init_seeds.clone()
        };
        if seeds.is_empty() || seeds.len() != self.members {
            return Err(Error::Config(format!(
                "ensemble.members is {} but {} init seeds are available",
                self.members,
                seeds.len()
            )));
        }
        for (i, a) in seeds.iter().enumerate() {
            if seeds[..i].contains(a) {
                return Err(Error::Config(format!("ensemble init seed {a} is used twice")));
            }
        }
        Ok(seeds)
    }
}

/// Trains every member independently (in parallel when the thread pool
/// allows); member `i` equals a standalone `train` with seed `i`.
pub fn train_ensemble(
    spec: &EnsembleSpec,
    model: &ModelConfig,
    train_set: &PatchDataset<'_>,
    val_set: &PatchDataset<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<(ModelBundle, TrainHistory)>> {
    let seeds = spec.seeds()?;
    seeds
        .par_iter()
        .enumerate()
        .map(|(member, &seed)| {
            let mut mc = model.clone();
            mc.init_seed = seed;
            crate::models::build_model(&mc)
                .and_then(|b| train(&b, train_set, val_set, cfg))
                .map_err(|e| Error::EnsembleMember {
                    member,
                    source: Box::new(e),
                })
        })
        .collect()
}

pub fn write_history(path: impl AsRef<Path>, history: &TrainHistory) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("epoch,train_loss,val_loss,recall,precision,f1,lr\n");
    for r in &history.records {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.recall, r.precision, r.f1, r.lr
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::sampling::csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| crate::sampling::csv_error(path, e)))
        .collect()
}
