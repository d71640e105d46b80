//! Momentum SGD with linear warmup and cosine annealing, the training
//! loop, JSON-lines logs and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError, Entry, TensorData};
use crate::evaluation::{self, EvalError, EvalMode, Labels};
use crate::model::{InputDims, ModelConfig, ModelError, Q2AModel, Q2AParams};
use crate::par::{self, Execution};
use crate::seed;
use crate::types::FeatureBundle;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AQTCCKPT";
pub const H0_TENSOR: &str = "decoder.h0";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("epoch fraction {0} outside the schedule")]
    RangeError(f64),
    #[error("missing feature cache for task {0}")]
    MissingCache(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// QA samples per update.
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            base_lr: 2e-3,
            warmup_epochs: 1,
            max_epochs: 6,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum must lie in [0, 1)");
        }
        if self.max_epochs > 0 && self.warmup_epochs >= self.max_epochs {
            return err("warmup_epochs must be below max_epochs");
        }
        Ok(())
    }
}

/// Linear warmup from 0, then cosine annealing to 0 at `max_epochs`.
pub fn lr_at(t: f64, c: &TrainConfig) -> Result<f64, TrainError> {
    let (w, m) = (c.warmup_epochs as f64, c.max_epochs as f64);
    if !(0.0..=m).contains(&t) {
        return Err(TrainError::RangeError(t));
    }
    if t < w {
        return Ok(c.base_lr * t / w);
    }
    Ok(c.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * (t - w) / (m - w)).cos()))
}

/// Rate used throughout epoch `k` (0-based): the schedule at the epoch's
/// midpoint, so neither the zero at `t = 0` nor the zero at the end is
/// ever applied.
pub fn epoch_lr(k: usize, c: &TrainConfig) -> Result<f64, TrainError> {
    lr_at(k as f64 + 0.5, c)
}

/// `v = μ v + g; p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: Q2AParams,
}

impl Sgd {
    pub fn new(params: &Q2AParams, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Q2AParams, grad: &Q2AParams, lr: f64) {
        let layers = params
            .layers_mut()
            .into_iter()
            .zip(self.velocity.layers_mut())
            .zip(grad.layers());
        for (((_, p), (_, v)), (_, g)) in layers {
            v.scale(self.momentum);
            v.add_scaled(1.0, g);
            p.add_scaled(-lr, v);
        }
    }
}

/// One labelled question: `bundles[bundle].qas[qa]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub bundle: usize,
    pub qa: usize,
    pub gt: Vec<usize>,
}

pub fn examples(bundles: &[FeatureBundle], labels: &Labels) -> Result<Vec<Example>, TrainError> {
    let mut out = Vec::new();
    for (b, bundle) in bundles.iter().enumerate() {
        for (q, qa) in bundle.qas.iter().enumerate() {
            let gt = labels
                .get(&qa.qa_id)
                .ok_or_else(|| EvalError::MissingLabels(qa.qa_id.clone()))?;
            crate::model::check_labels(qa, gt)?;
            out.push(Example {
                bundle: b,
                qa: q,
                gt: gt.clone(),
            });
        }
    }
    Ok(out)
}

/// One line of the training log; epoch 0 describes the initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r1: Option<f64>,
    pub val_r3: Option<f64>,
    pub val_mr: Option<f64>,
    pub val_mrr: Option<f64>,
}

pub fn log_jsonl(log: &[EpochLog]) -> String {
    log.iter()
        .map(|l| serde_json::to_string(l).expect("plain data") + "\n")
        .collect()
}

pub struct TrainOutcome {
    pub model: Q2AModel,
    pub log: Vec<EpochLog>,
}

fn mean_loss(
    model: &Q2AModel,
    bundles: &[FeatureBundle],
    ex: &[Example],
    exec: Execution,
) -> Result<f64, TrainError> {
    let losses = par::try_map(exec, ex, |e| {
        model.qa_loss(&bundles[e.bundle], &bundles[e.bundle].qas[e.qa], &e.gt)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn epoch_record(
    epoch: usize,
    train_loss: f64,
    model: &Q2AModel,
    val: &[FeatureBundle],
    labels: &Labels,
    exec: Execution,
) -> Result<EpochLog, TrainError> {
    let has_val = val.iter().any(|b| !b.qas.is_empty());
    let report = if has_val {
        Some(evaluation::evaluate(
            model,
            val,
            labels,
            EvalMode::FreeRunning,
            exec,
        )?)
    } else {
        None
    };
    Ok(EpochLog {
        epoch,
        train_loss,
        val_r1: report.as_ref().map(|r| r.r1),
        val_r3: report.as_ref().map(|r| r.r3),
        val_mr: report.as_ref().map(|r| r.mr),
        val_mrr: report.as_ref().map(|r| r.mrr),
    })
}

/// Train a freshly initialized model (seeded by `train_config.seed`).
///
/// Per-question gradients of a batch may be computed in parallel; they are
/// summed in batch order, so parallel and sequential runs agree bitwise.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_bundles: &[FeatureBundle],
    val_bundles: &[FeatureBundle],
    labels: &Labels,
    exec: Execution,
) -> Result<TrainOutcome, TrainError> {
    train_config.validate()?;
    let first = train_bundles
        .first()
        .ok_or_else(|| TrainError::Config("no training tasks".into()))?;
    let model = Q2AModel::new(
        model_config.clone(),
        InputDims::of(first),
        train_config.seed,
    )?;
    train_from(
        model,
        train_config,
        train_bundles,
        val_bundles,
        labels,
        exec,
    )
}

/// Train starting from the given parameters.
pub fn train_from(
    mut model: Q2AModel,
    cfg: &TrainConfig,
    train_bundles: &[FeatureBundle],
    val_bundles: &[FeatureBundle],
    labels: &Labels,
    exec: Execution,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    for b in train_bundles.iter().chain(val_bundles) {
        model.check_bundle(b)?;
    }
    let ex = examples(train_bundles, labels)?;
    let mut log = vec![epoch_record(
        0,
        mean_loss(&model, train_bundles, &ex, exec)?,
        &model,
        val_bundles,
        labels,
        exec,
    )?];
    let mut sgd = Sgd::new(&model.params, cfg.momentum);
    let mut order: Vec<usize> = (0..ex.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let lr = epoch_lr(epoch, cfg)?;
        order.sort_unstable();
        order.shuffle(&mut seed::rng(
            cfg.seed,
            seed::stream::SHUFFLE,
            epoch as u64,
        ));
        let mut loss_sum = 0.0;
        for (batch_id, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = par::try_map(exec, batch, |&i| {
                let e = &ex[i];
                let bundle = &train_bundles[e.bundle];
                model.loss_and_grad(bundle, &bundle.qas[e.qa], &e.gt)
            })?;
            let mut grad = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                grad.add_scaled(1.0, g);
            }
            let n = batch.len() as f64;
            grad.scale(1.0 / n);
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batch_id,
                });
            }
            loss_sum += batch_loss;
            sgd.step(&mut model.params, &grad, lr);
        }
        let train_loss = loss_sum / ex.len().max(1) as f64;
        log.push(epoch_record(
            epoch + 1,
            train_loss,
            &model,
            val_bundles,
            labels,
            exec,
        )?);
    }
    Ok(TrainOutcome { model, log })
}

/// Everything a checkpoint stores besides the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub input: InputDims,
    pub train_config: TrainConfig,
    pub epoch: usize,
    /// Shuffling is derived from `(seed, epoch)`, which is the whole RNG state.
    pub rng: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Q2AModel,
    pub train_config: TrainConfig,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut entries: Vec<Entry> = Vec::new();
        for (name, l) in self.model.params.layers() {
            entries.push(Entry::f64(
                format!("{name}.w"),
                &[l.w.nrows(), l.w.ncols()],
                l.w.iter().copied().collect(),
            ));
            entries.push(Entry::f64(format!("{name}.b"), &[l.b.len()], l.b.to_vec()));
        }
        let h0 = &self.model.params.decoder.h0;
        entries.push(Entry::f64(H0_TENSOR, &[h0.len()], h0.to_vec()));
        let meta = CheckpointMeta {
            model_config: self.model.config.clone(),
            input: self.model.input,
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            rng: BTreeMap::from([
                ("seed".to_string(), self.train_config.seed),
                ("epoch".to_string(), self.epoch as u64),
            ]),
        };
        let trailer = serde_json::to_vec(&meta).expect("plain data");
        container::encode(CHECKPOINT_MAGIC, &entries, Some(&trailer))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TrainError> {
        let (entries, trailer) = container::decode(CHECKPOINT_MAGIC, bytes)?;
        let trailer =
            trailer.ok_or_else(|| TrainError::Checkpoint("missing JSON trailer".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&trailer).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut model = Q2AModel::new(meta.model_config, meta.input, 0)?;
        let mut tensors: BTreeMap<String, Entry> =
            entries.into_iter().map(|e| (e.name.clone(), e)).collect();
        let mut take = |name: String, shape: Vec<usize>| -> Result<Vec<f64>, TrainError> {
            let e = tensors
                .remove(&name)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor {name}")))?;
            if e.shape() != shape {
                return Err(TrainError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    e.shape()
                )));
            }
            match e.data {
                TensorData::F64(v) => Ok(v),
                TensorData::F32(_) => {
                    Err(TrainError::Checkpoint(format!("tensor {name} is not f64")))
                }
            }
        };
        for (name, l) in model.params.layers_mut() {
            let (r, c) = l.w.dim();
            l.w = Array2::from_shape_vec((r, c), take(format!("{name}.w"), vec![r, c])?)
                .expect("shape checked");
            l.b = Array1::from(take(format!("{name}.b"), vec![l.b.len()])?);
        }
        let d_r = model.params.decoder.h0.len();
        model.params.decoder.h0 = Array1::from(take(H0_TENSOR.to_string(), vec![d_r])?);
        if let Some(extra) = tensors.keys().next() {
            return Err(TrainError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            model,
            train_config: meta.train_config,
            epoch: meta.epoch,
        })
    }

    /// Atomic write (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(container::write_atomic(path, &self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::decode(&fs::read(path)?)
    }
}
