//! Normalised, windowed, chronologically split datasets.

use std::ops::Range;

use lobforge_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{feature_dim, feature_vector};
use crate::labeling::{diff_targets, LabelSeries, MovementLabel};
use crate::market_data::TickSeries;

pub const NORM_EPS: f64 = 1e-8;
pub const MS_PER_DAY: i64 = 86_400_000;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot fit normalisation on an empty split")]
    EmptySplit,
    #[error("dimension mismatch: stats have {expected}, data has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("no valid anchors: {0}")]
    NoAnchors(String),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("labels do not line up with ticks: {0}")]
    LabelMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    MidPrice,
    MidDiff,
    Movement,
}

impl Task {
    pub fn is_regression(self) -> bool {
        self != Task::Movement
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mid_price" => Ok(Task::MidPrice),
            "mid_diff" => Ok(Task::MidDiff),
            "movement" => Ok(Task::Movement),
            _ => Err(format!("unknown task {s:?} (mid_price, mid_diff, movement)")),
        }
    }
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, j: usize, x: f64) -> f64 {
        (x - self.mean[j]) / (self.std[j] + self.epsilon)
    }

    pub fn denormalize(&self, j: usize, z: f64) -> f64 {
        z * (self.std[j] + self.epsilon) + self.mean[j]
    }

    /// Inverse of [`apply_norm`].
    pub fn invert(&self, data: &[f64]) -> Result<Vec<f64>, DatasetError> {
        check_dim(data, self.dim())?;
        Ok(data.iter().enumerate().map(|(i, &z)| self.denormalize(i % self.dim(), z)).collect())
    }
}

fn check_dim(data: &[f64], dim: usize) -> Result<(), DatasetError> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(DatasetError::DimensionMismatch { expected: dim, got: data.len() });
    }
    Ok(())
}

/// Column means and population standard deviations of a row-major matrix.
pub fn fit_norm(rows: &[f64], dim: usize) -> Result<NormStats, DatasetError> {
    if rows.is_empty() {
        return Err(DatasetError::EmptySplit);
    }
    check_dim(rows, dim)?;
    let n = (rows.len() / dim) as f64;
    let mut mean = vec![0.0; dim];
    for row in rows.chunks_exact(dim) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for row in rows.chunks_exact(dim) {
        for j in 0..dim {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    Ok(NormStats {
        mean,
        std: var.into_iter().map(|v| (v / n).sqrt()).collect(),
        epsilon: NORM_EPS,
    })
}

pub fn apply_norm(rows: &[f64], stats: &NormStats) -> Result<Vec<f64>, DatasetError> {
    check_dim(rows, stats.dim())?;
    Ok(rows.iter().enumerate().map(|(i, &x)| stats.normalize(i % stats.dim(), x)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSpec {
    Fraction { train: f64, val: f64, test: f64 },
    ByDay { train_days: usize, val_days: usize, test_days: usize },
}

impl SplitSpec {
    pub fn fraction(train: f64, val: f64, test: f64) -> Self {
        SplitSpec::Fraction { train, val, test }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous chronological tick ranges. Fraction boundaries are rounded to
/// the nearest tick. By-day splits take the first `train_days` UTC days, the
/// next `val_days`, and the last `test_days`; any days between validation
/// and test are left out.
pub fn split(ts: &[i64], spec: &SplitSpec) -> Result<SplitRanges, DatasetError> {
    let n = ts.len();
    match *spec {
        SplitSpec::Fraction { train, val, test } => {
            if [train, val, test].iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
                return Err(DatasetError::InfeasibleSplit("fractions must be non-negative".into()));
            }
            if ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(DatasetError::InfeasibleSplit(format!(
                    "fractions sum to {}, not 1",
                    train + val + test
                )));
            }
            let a = ((n as f64 * train).round() as usize).min(n);
            let b = ((n as f64 * (train + val)).round() as usize).clamp(a, n);
            if a == 0 {
                return Err(DatasetError::InfeasibleSplit(format!("{n} ticks leave an empty training split")));
            }
            Ok(SplitRanges { train: 0..a, val: a..b, test: b..n })
        }
        SplitSpec::ByDay { train_days, val_days, test_days } => {
            if train_days == 0 {
                return Err(DatasetError::InfeasibleSplit("train_days must be >= 1".into()));
            }
            // Start index of each distinct UTC day, in order.
            let mut starts: Vec<usize> = Vec::new();
            let mut prev_day = None;
            for (i, &t) in ts.iter().enumerate() {
                let day = t.div_euclid(MS_PER_DAY);
                if prev_day != Some(day) {
                    starts.push(i);
                    prev_day = Some(day);
                }
            }
            let days = starts.len();
            let need = train_days + val_days + test_days;
            if days < need {
                return Err(DatasetError::InfeasibleSplit(format!(
                    "{need} days requested, series spans {days}"
                )));
            }
            let start = |d: usize| if d >= days { n } else { starts[d] };
            Ok(SplitRanges {
                train: 0..start(train_days),
                val: start(train_days)..start(train_days + val_days),
                test: start(days - test_days)..n,
            })
        }
    }
}

/// Anchors (last input row) inside `range` whose window and targets stay
/// within it.
pub fn anchors_in(range: &Range<usize>, lx: usize, k: usize, mask: Option<&[bool]>) -> Vec<usize> {
    if lx == 0 || range.len() < lx + k {
        return Vec::new();
    }
    let first = range.start + lx - 1;
    let last = range.end - k; // exclusive
    (first..last).filter(|&t| mask.is_none_or(|m| m[t])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Sequence(Vec<f64>),
    Class(MovementLabel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// `L_x × d`, row-major.
    pub window: Vec<f64>,
    pub window_ts: Vec<i64>,
    pub target: Target,
    pub target_ts: Vec<i64>,
    pub anchor: usize,
    pub anchor_ts: i64,
}

/// Un-normalised windows over a whole series: targets are the next `k`
/// mids, the `k` mid differences, or the anchor's label.
pub fn make_windows(
    series: &TickSeries,
    labels: Option<&LabelSeries>,
    task: Task,
    lx: usize,
    k: usize,
    include_mid: bool,
) -> Result<Vec<WindowedSample>, DatasetError> {
    if lx == 0 || k == 0 {
        return Err(DatasetError::InvalidConfig("L_x and k must be >= 1".into()));
    }
    if series.len() < lx + k {
        return Err(DatasetError::NoAnchors(format!(
            "{} ticks cannot hold a window of {lx} plus {k} targets",
            series.len()
        )));
    }
    let mask = match (task, labels) {
        (Task::Movement, Some(l)) => {
            check_labels(series, l)?;
            Some(l.mask.as_slice())
        }
        (Task::Movement, None) => return Err(DatasetError::InvalidConfig("movement task needs labels".into())),
        _ => None,
    };
    let mids = series.mids();
    let ts = series.timestamps();
    let anchors = anchors_in(&(0..series.len()), lx, k, mask);
    Ok(anchors
        .into_iter()
        .map(|t| {
            let window = series.snapshots[t + 1 - lx..=t]
                .iter()
                .flat_map(|s| feature_vector(s, include_mid))
                .collect();
            let target = match task {
                Task::MidPrice => Target::Sequence(mids[t + 1..=t + k].to_vec()),
                Task::MidDiff => Target::Sequence(diff_targets(&mids, t, k).expect("anchor leaves k future ticks")),
                Task::Movement => Target::Class(labels.expect("checked above").labels[t]),
            };
            WindowedSample {
                window,
                window_ts: ts[t + 1 - lx..=t].to_vec(),
                target,
                target_ts: ts[t + 1..=t + k].to_vec(),
                anchor: t,
                anchor_ts: ts[t],
            }
        })
        .collect())
}

fn check_labels(series: &TickSeries, labels: &LabelSeries) -> Result<(), DatasetError> {
    if labels.len() != series.len() {
        return Err(DatasetError::LabelMismatch(format!(
            "{} labels for {} ticks",
            labels.len(),
            series.len()
        )));
    }
    if let Some(i) = (0..series.len()).find(|&i| labels.ts[i] != series.snapshots[i].ts) {
        return Err(DatasetError::LabelMismatch(format!("timestamp differs at row {i}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub task: Task,
    pub lx: usize,
    pub k: usize,
    pub split: SplitSpec,
    pub include_mid: bool,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.lx == 0 || self.k == 0 {
            return Err(DatasetError::InvalidConfig("L_x and k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fitted statistics and split geometry: everything needed to rebuild a
/// [`Dataset`] from the same ticks and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: DatasetConfig,
    pub dim: usize,
    pub n_ticks: usize,
    pub splits: SplitRanges,
    pub input_stats: NormStats,
    /// Scalar statistics applied to every regression target value.
    pub target_stats: Option<NormStats>,
    pub counts: [usize; 3],
}

/// Normalised features for every tick plus per-split anchor lists.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    features: Vec<f64>,
    pub ts: Vec<i64>,
    pub mids: Vec<f64>,
    labels: Option<Vec<MovementLabel>>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A model-ready minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, L_x, d]`.
    pub x: Tensor,
    /// Window timestamps, `B · L_x`.
    pub ts: Vec<i64>,
    /// Normalised regression targets `[B, k]`.
    pub y_seq: Option<Tensor>,
    pub y_class: Option<Vec<usize>>,
    pub anchors: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

impl Dataset {
    pub fn build(series: &TickSeries, labels: Option<&LabelSeries>, config: &DatasetConfig) -> Result<Self, DatasetError> {
        config.validate()?;
        let (lx, k) = (config.lx, config.k);
        let ts = series.timestamps();
        let splits = split(&ts, &config.split)?;
        let dim = feature_dim(config.include_mid);
        let raw: Vec<f64> = series
            .snapshots
            .iter()
            .flat_map(|s| feature_vector(s, config.include_mid))
            .collect();
        let input_stats = fit_norm(&raw[splits.train.start * dim..splits.train.end * dim], dim)?;
        let features = apply_norm(&raw, &input_stats)?;
        let mids = series.mids();

        let (mask, label_vec) = match config.task {
            Task::Movement => {
                let l = labels.ok_or_else(|| DatasetError::InvalidConfig("movement task needs labels".into()))?;
                check_labels(series, l)?;
                (Some(l.mask.clone()), Some(l.labels.clone()))
            }
            _ => (None, None),
        };
        let train = anchors_in(&splits.train, lx, k, mask.as_deref());
        let val = anchors_in(&splits.val, lx, k, mask.as_deref());
        let test = anchors_in(&splits.test, lx, k, mask.as_deref());
        if train.is_empty() {
            return Err(DatasetError::NoAnchors(format!(
                "training split of {} ticks has no anchor for L_x = {lx}, k = {k}",
                splits.train.len()
            )));
        }

        let target_stats = match config.task {
            Task::MidPrice => Some(fit_norm(&mids[splits.train.clone()], 1)?),
            Task::MidDiff => {
                let pooled: Vec<f64> = train
                    .iter()
                    .flat_map(|&t| diff_targets(&mids, t, k).expect("anchor leaves k future ticks"))
                    .collect();
                Some(fit_norm(&pooled, 1)?)
            }
            Task::Movement => None,
        };
        let counts = [train.len(), val.len(), test.len()];
        Ok(Self {
            meta: DatasetMeta {
                config: config.clone(),
                dim,
                n_ticks: series.len(),
                splits,
                input_stats,
                target_stats,
                counts,
            },
            features,
            ts,
            mids,
            labels: label_vec,
            train,
            val,
            test,
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.meta.config
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn anchors(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Raw (un-normalised) regression targets for an anchor.
    pub fn raw_target(&self, t: usize) -> Vec<f64> {
        let k = self.meta.config.k;
        match self.meta.config.task {
            Task::MidPrice => self.mids[t + 1..=t + k].to_vec(),
            Task::MidDiff => diff_targets(&self.mids, t, k).expect("anchor leaves k future ticks"),
            Task::Movement => Vec::new(),
        }
    }

    pub fn label(&self, t: usize) -> Option<MovementLabel> {
        self.labels.as_ref().map(|l| l[t])
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        self.meta.target_stats.as_ref().map_or(z, |s| s.denormalize(0, z))
    }

    pub fn batch(&self, anchors: &[usize]) -> Batch {
        let DatasetConfig { lx, k, task, .. } = self.meta.config;
        let d = self.dim();
        let b = anchors.len();
        let mut x = Vec::with_capacity(b * lx * d);
        let mut ts = Vec::with_capacity(b * lx);
        for &t in anchors {
            x.extend_from_slice(&self.features[(t + 1 - lx) * d..(t + 1) * d]);
            ts.extend_from_slice(&self.ts[t + 1 - lx..=t]);
        }
        let (y_seq, y_class) = match task {
            Task::Movement => (
                None,
                Some(anchors.iter().map(|&t| self.labels.as_ref().expect("movement labels")[t].code()).collect()),
            ),
            _ => {
                let stats = self.meta.target_stats.as_ref().expect("regression stats");
                let y: Vec<f64> = anchors
                    .iter()
                    .flat_map(|&t| self.raw_target(t))
                    .map(|v| stats.normalize(0, v))
                    .collect();
                (Some(Tensor::new(vec![b, k], y).expect("target shape")), None)
            }
        };
        Batch {
            x: Tensor::new(vec![b, lx, d], x).expect("window shape"),
            ts,
            y_seq,
            y_class,
            anchors: anchors.to_vec(),
        }
    }

    /// Normalised sample for one anchor.
    pub fn sample(&self, t: usize) -> WindowedSample {
        let DatasetConfig { lx, k, task, .. } = self.meta.config;
        let d = self.dim();
        let target = match task {
            Task::Movement => Target::Class(self.label(t).expect("movement labels")),
            _ => Target::Sequence(
                self.raw_target(t)
                    .into_iter()
                    .map(|v| self.meta.target_stats.as_ref().expect("stats").normalize(0, v))
                    .collect(),
            ),
        };
        WindowedSample {
            window: self.features[(t + 1 - lx) * d..(t + 1) * d].to_vec(),
            window_ts: self.ts[t + 1 - lx..=t].to_vec(),
            target,
            target_ts: self.ts[t + 1..=t + k].to_vec(),
            anchor: t,
            anchor_ts: self.ts[t],
        }
    }
}

/// Training order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
    idx.shuffle(&mut rng);
    idx
}
