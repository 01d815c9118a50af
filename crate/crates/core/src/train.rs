//! Minibatch training with Adam, gradient clipping and early stopping.

use lobforge_autodiff::{clip_global_norm, Adam, AdamConfig, NnError, ParamStore, Tape};
use serde::{Deserialize, Serialize};

use crate::dataset::{epoch_order, Batch, Dataset, Split, Task};
use crate::models::{HeadKind, Model, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split has no samples")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(ModelError::Nn(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    CrossEntropy,
}

impl LossKind {
    pub fn for_task(task: Task) -> Self {
        if task.is_regression() {
            LossKind::L2
        } else {
            LossKind::CrossEntropy
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// Defaults for a task: batch 32 for regression, 64 for movement.
    pub fn for_task(task: Task) -> Self {
        Self {
            epochs: 10,
            batch_size: if task.is_regression() { 32 } else { 64 },
            lr: 1e-4,
            early_stop_patience: 3,
            seed: 0,
            loss: LossKind::for_task(task),
            clip_norm: Some(5.0),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return bad("epochs, batch_size and early_stop_patience must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    fn check_head(&self, head: HeadKind) -> Result<(), TrainError> {
        match (self.loss, head) {
            (LossKind::L2, HeadKind::RegressionSeq) | (LossKind::CrossEntropy, HeadKind::Movement) => Ok(()),
            _ => Err(TrainError::InvalidConfig(format!("{:?} loss does not fit a {head:?} head", self.loss))),
        }
    }
}

/// Outcome of feeding one validation loss to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, waited: 0 }
    }

    /// `epoch` is 1-based.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.waited = 0;
            return StopDecision::Improved;
        }
        self.waited += 1;
        if self.waited >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: u64,
}

fn batch_loss(model: &Model, tape: &mut Tape, batch: &Batch, train: bool) -> Result<lobforge_autodiff::Var, TrainError> {
    let out = model.forward_batch(tape, batch, train)?;
    Ok(model.loss(tape, out, batch)?)
}

/// Mean per-sample loss over a split, without teacher forcing.
pub fn evaluate_loss(model: &Model, data: &Dataset, split: Split, batch_size: usize) -> Result<f64, TrainError> {
    let anchors = data.anchors(split);
    if anchors.is_empty() {
        return Err(TrainError::EmptySplit(split_name(split)));
    }
    let mut total = 0.0;
    for chunk in anchors.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk);
        let mut tape = Tape::new();
        let loss = batch_loss(model, &mut tape, &batch, false)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / anchors.len() as f64)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Turns a non-finite value anywhere in the graph into a divergence.
fn diverged(epoch: usize, batch: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Model(ModelError::Nn(NnError::NonFinite { op })) => TrainError::Divergence {
            epoch,
            batch,
            detail: format!("non-finite value in {op}"),
        },
        e => e,
    }
}

/// One optimiser step on `batch`; returns the pre-step loss. `epoch` and
/// `index` only label a divergence.
fn step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    clip: Option<f64>,
    (epoch, index): (usize, usize),
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let loss = batch_loss(model, &mut tape, batch, true).map_err(diverged(epoch, index))?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(TrainError::Divergence { epoch, batch: index, detail: format!("loss {value}") });
    }
    tape.backward(loss).map_err(|e| diverged(epoch, index)(e.into()))?;
    let mut grads = tape.param_grads();
    if let Some(c) = clip {
        clip_global_norm(&mut grads, c);
    }
    adam.step(&mut model.params, &grads)?;
    Ok(value)
}

/// Trains `model` on the train split, early-stopping on the val split, and
/// leaves the best-validation weights in `model.params`.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    cfg.check_head(model.config.head)?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let mut adam = Adam::new(&model.params, AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best: Option<ParamStore> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let anchors: Vec<usize> = idx.iter().map(|&i| data.train[i]).collect();
            let batch = data.batch(&anchors);
            let loss = step(model, &mut adam, &batch, cfg.clip_norm, (epoch, b))?;
            total += loss * anchors.len() as f64;
        }
        let train_loss = total / data.train.len() as f64;
        let val_loss = evaluate_loss(model, data, Split::Val, cfg.batch_size).map_err(diverged(epoch, 0))?;
        if !val_loss.is_finite() {
            return Err(TrainError::Divergence { epoch, batch: 0, detail: format!("validation loss {val_loss}") });
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        history.push(EpochRecord { epoch, train_loss, val_loss });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = Some(model.params.clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some(p) = best {
        model.params = p;
    }
    Ok(TrainHistory {
        epochs: history,
        best_epoch: stopper.best_epoch().expect("at least one finite epoch"),
        best_val_loss: stopper.best_loss(),
        stopped_early,
        steps: adam.step_count(),
    })
}

/// Repeated optimiser steps on a single batch; returns the loss before
/// every step.
pub fn fit_batch(model: &mut Model, batch: &Batch, steps: usize, lr: f64, clip: Option<f64>) -> Result<Vec<f64>, TrainError> {
    let mut adam = Adam::new(&model.params, AdamConfig { lr, ..Default::default() });
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        losses.push(step(model, &mut adam, batch, clip, (0, s))?);
    }
    Ok(losses)
}
