//! Smoothed three-class movement labels, regression targets and threshold
//! calibration.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::market_data::TickSeries;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("need {need} ticks, series has {len}")]
    TooShort { len: usize, need: usize },
    #[error("t = {t} has fewer than {k} ticks of history")]
    InsufficientHistory { t: usize, k: usize },
    #[error("t = {t} has fewer than {k} future ticks")]
    InsufficientFuture { t: usize, k: usize },
    #[error("past mean {0} is not positive")]
    NonPositiveMean(f64),
    #[error("invalid label config: {0}")]
    InvalidConfig(String),
    #[error("all changes are identical; no threshold can balance the classes")]
    Degenerate,
    #[error("labels line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MovementLabel {
    Fall = 0,
    Stationary = 1,
    Rise = 2,
}

impl MovementLabel {
    pub const ALL: [MovementLabel; 3] = [MovementLabel::Fall, MovementLabel::Stationary, MovementLabel::Rise];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub horizon_k: usize,
    pub delta: f64,
}

impl LabelConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        if self.horizon_k == 0 {
            return Err(LabelError::InvalidConfig("horizon_k must be >= 1".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(LabelError::InvalidConfig("delta must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Mean of `mid[t−k+1..=t]`.
pub fn past_mean(mid: &[f64], t: usize, k: usize) -> Result<f64, LabelError> {
    if k == 0 || t + 1 < k || t >= mid.len() {
        return Err(LabelError::InsufficientHistory { t, k });
    }
    Ok(mid[t + 1 - k..=t].iter().sum::<f64>() / k as f64)
}

/// Mean of `mid[t+1..=t+k]`.
pub fn future_mean(mid: &[f64], t: usize, k: usize) -> Result<f64, LabelError> {
    if k == 0 || t + k >= mid.len() {
        return Err(LabelError::InsufficientFuture { t, k });
    }
    Ok(mid[t + 1..=t + k].iter().sum::<f64>() / k as f64)
}

pub fn pct_change(m_minus: f64, m_plus: f64) -> Result<f64, LabelError> {
    if m_minus <= 0.0 || !m_minus.is_finite() {
        return Err(LabelError::NonPositiveMean(m_minus));
    }
    Ok((m_plus - m_minus) / m_minus)
}

/// Positive change above `delta` is a rise; the band `[−δ, δ]` is inclusive.
pub fn classify(l: f64, delta: f64) -> MovementLabel {
    if l > delta {
        MovementLabel::Rise
    } else if l < -delta {
        MovementLabel::Fall
    } else {
        MovementLabel::Stationary
    }
}

/// `mid[t+τ] − mid[t]` for τ = 1..=k.
pub fn diff_targets(mid: &[f64], t: usize, k: usize) -> Result<Vec<f64>, LabelError> {
    if k == 0 || t + k >= mid.len() {
        return Err(LabelError::InsufficientFuture { t, k });
    }
    Ok((1..=k).map(|tau| mid[t + tau] - mid[t]).collect())
}

/// Per-tick labels. Entries with `mask[t] == false` carry placeholder values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSeries {
    pub horizon_k: usize,
    pub delta: f64,
    pub ts: Vec<i64>,
    pub labels: Vec<MovementLabel>,
    pub changes: Vec<f64>,
    pub mask: Vec<bool>,
}

impl LabelSeries {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Fraction of valid ticks in each class (fall, stationary, rise).
    pub fn shares(&self) -> [f64; 3] {
        let mut counts = [0usize; 3];
        for (l, _) in self.labels.iter().zip(&self.mask).filter(|(_, &m)| m) {
            counts[l.code()] += 1;
        }
        let n = counts.iter().sum::<usize>().max(1) as f64;
        counts.map(|c| c as f64 / n)
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for (l, _) in self.labels.iter().zip(&self.mask).filter(|(_, &m)| m) {
            counts[l.code()] += 1;
        }
        counts
    }
}

/// Smoothed changes `l_t` for every tick; `None` outside `[k−1, len−k−1]`.
pub fn smoothed_changes(mid: &[f64], k: usize) -> Result<Vec<Option<f64>>, LabelError> {
    if k == 0 {
        return Err(LabelError::InvalidConfig("horizon_k must be >= 1".into()));
    }
    if mid.len() < 2 * k {
        return Err(LabelError::TooShort { len: mid.len(), need: 2 * k });
    }
    let mut out = vec![None; mid.len()];
    for (t, slot) in out.iter_mut().enumerate().take(mid.len() - k).skip(k - 1) {
        let m_minus = past_mean(mid, t, k)?;
        let m_plus = future_mean(mid, t, k)?;
        *slot = Some(pct_change(m_minus, m_plus)?);
    }
    Ok(out)
}

pub fn label_series(series: &TickSeries, cfg: &LabelConfig) -> Result<LabelSeries, LabelError> {
    cfg.validate()?;
    let mids = series.mids();
    let changes = smoothed_changes(&mids, cfg.horizon_k)?;
    Ok(LabelSeries {
        horizon_k: cfg.horizon_k,
        delta: cfg.delta,
        ts: series.timestamps(),
        labels: changes
            .iter()
            .map(|c| c.map_or(MovementLabel::Stationary, |l| classify(l, cfg.delta)))
            .collect(),
        changes: changes.iter().map(|c| c.unwrap_or(0.0)).collect(),
        mask: changes.iter().map(Option::is_some).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub delta: f64,
    pub shares: [f64; 3],
    /// `max_c |share_c − 1/3|` at `delta`.
    pub imbalance: f64,
    pub grid: Vec<f64>,
}

pub const CALIBRATION_GRID: usize = 200;

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let idx = ((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// 200 log-spaced candidates between the 1st and 99th percentile of `|l|`.
pub fn threshold_grid(changes: &[f64]) -> Result<Vec<f64>, LabelError> {
    let mut abs: Vec<f64> = changes.iter().map(|l| l.abs()).collect();
    abs.sort_by(f64::total_cmp);
    if abs.is_empty() || changes.iter().all(|&l| l == changes[0]) {
        return Err(LabelError::Degenerate);
    }
    let mut lo = percentile_sorted(&abs, 0.01);
    let hi = percentile_sorted(&abs, 0.99);
    if lo <= 0.0 {
        lo = abs.iter().copied().find(|&a| a > 0.0).unwrap_or(0.0).min(hi);
    }
    if hi <= 0.0 {
        return Err(LabelError::Degenerate);
    }
    if hi <= lo {
        return Ok(vec![hi]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..CALIBRATION_GRID)
        .map(|i| (a + (b - a) * i as f64 / (CALIBRATION_GRID - 1) as f64).exp())
        .collect())
}

pub fn class_shares(changes: &[f64], delta: f64) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for &l in changes {
        counts[classify(l, delta).code()] += 1;
    }
    counts.map(|c| c as f64 / changes.len().max(1) as f64)
}

fn imbalance(shares: &[f64; 3]) -> f64 {
    shares.iter().map(|s| (s - 1.0 / 3.0).abs()).fold(0.0, f64::max)
}

/// Picks the grid δ whose labels are closest to a uniform three-way split.
/// Ties go to the smallest δ.
pub fn calibrate_changes(changes: &[f64]) -> Result<Calibration, LabelError> {
    let grid = threshold_grid(changes)?;
    // Sorting once lets each candidate be counted by binary search.
    let mut sorted = changes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut best: Option<(f64, [f64; 3], f64)> = None;
    for &delta in &grid {
        let fall = sorted.partition_point(|&l| l < -delta);
        let not_rise = sorted.partition_point(|&l| l <= delta);
        let shares = [
            fall as f64 / n,
            (not_rise - fall) as f64 / n,
            (sorted.len() - not_rise) as f64 / n,
        ];
        let imb = imbalance(&shares);
        if best.is_none_or(|(_, _, b)| imb < b) {
            best = Some((delta, shares, imb));
        }
    }
    let (delta, shares, imbalance) = best.expect("grid is non-empty");
    Ok(Calibration { delta, shares, imbalance, grid })
}

pub fn calibrate_threshold(series: &TickSeries, horizon_k: usize) -> Result<Calibration, LabelError> {
    let changes: Vec<f64> = smoothed_changes(&series.mids(), horizon_k)?.into_iter().flatten().collect();
    if changes.is_empty() {
        return Err(LabelError::TooShort { len: series.len(), need: 2 * horizon_k });
    }
    calibrate_changes(&changes)
}

pub const LABELS_HEADER: &str = "ts_ms,label,l_t,mask";

/// Masked rows leave `label` and `l_t` empty.
pub fn write_labels(path: &Path, labels: &LabelSeries) -> Result<(), LabelError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{LABELS_HEADER}")?;
    for i in 0..labels.len() {
        if labels.mask[i] {
            writeln!(w, "{},{},{},1", labels.ts[i], labels.labels[i].code(), labels.changes[i])?;
        } else {
            writeln!(w, "{},,,0", labels.ts[i])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a labels file. Horizon and δ are not stored in the file and are
/// taken from the caller.
pub fn read_labels(path: &Path, cfg: &LabelConfig) -> Result<LabelSeries, LabelError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = LabelSeries {
        horizon_k: cfg.horizon_k,
        delta: cfg.delta,
        ts: vec![],
        labels: vec![],
        changes: vec![],
        mask: vec![],
    };
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if idx == 0 {
            if line.trim_end() != LABELS_HEADER {
                return Err(LabelError::Malformed { line: 1, reason: "unexpected header".into() });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| LabelError::Malformed { line: lineno, reason };
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        let ts = f[0].parse::<i64>().map_err(|e| bad(format!("ts_ms: {e}")))?;
        let valid = match f[3] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("mask must be 0 or 1, got {other:?}"))),
        };
        out.ts.push(ts);
        out.mask.push(valid);
        if valid {
            let code = f[1].parse::<usize>().map_err(|e| bad(format!("label: {e}")))?;
            out.labels.push(MovementLabel::from_code(code).ok_or_else(|| bad(format!("label {code} not in 0..=2")))?);
            out.changes.push(f[2].parse::<f64>().map_err(|e| bad(format!("l_t: {e}")))?);
        } else {
            out.labels.push(MovementLabel::Stationary);
            out.changes.push(0.0);
        }
    }
    Ok(out)
}
