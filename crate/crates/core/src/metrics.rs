//! Regression and classification metrics, and split-level evaluation.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split, Task};
use crate::labeling::MovementLabel;
use crate::models::{argmax_rows, Model, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("truth has zero variance; R² is undefined")]
    ZeroVariance,
    #[error("label {0} is not a movement class")]
    InvalidLabel(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check(pred: &[f64], truth: &[f64]) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, y)| (y - p) * (y - p)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, y)| (y - p).abs()).sum::<f64>() / pred.len() as f64)
}

/// Out-of-sample R², `1 − Σ(Y−Ŷ)² / Σ(Y−Ȳ)²`. Predicting the truth mean
/// gives exactly 0 and a perfect prediction exactly 1.
pub fn r2_oos(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot <= 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(1.0 - sse / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub accuracy: f64,
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: [[usize; 3]; 3],
    pub support: [usize; 3],
    /// Undefined per-class ratios that were reported as 0.
    pub flags: Vec<String>,
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> Result<[[usize; 3]; 3], MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut m = [[0usize; 3]; 3];
    for (&p, &y) in preds.iter().zip(labels) {
        for c in [p, y] {
            if c > 2 {
                return Err(MetricError::InvalidLabel(c));
            }
        }
        m[y][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize, what: &str, class: usize, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        let name = format!("{:?}", MovementLabel::from_code(class).expect("class < 3")).to_lowercase();
        flags.push(format!("{what} undefined for class {name}"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn report_from_confusion(m: [[usize; 3]; 3]) -> ClassificationReport {
    let n: usize = m.iter().flatten().sum();
    let mut flags = Vec::new();
    let (mut precision, mut recall, mut f1) = ([0.0; 3], [0.0; 3], [0.0; 3]);
    let mut support = [0; 3];
    for c in 0..3 {
        let tp = m[c][c];
        let predicted: usize = (0..3).map(|r| m[r][c]).sum();
        support[c] = m[c].iter().sum();
        precision[c] = ratio(tp, predicted, "precision", c, &mut flags);
        recall[c] = ratio(tp, support[c], "recall", c, &mut flags);
        let s = precision[c] + recall[c];
        f1[c] = if s > 0.0 { 2.0 * precision[c] * recall[c] / s } else { 0.0 };
    }
    let mean = |v: [f64; 3]| v.iter().sum::<f64>() / 3.0;
    let correct: usize = (0..3).map(|c| m[c][c]).sum();
    ClassificationReport {
        n,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        precision,
        recall,
        f1,
        macro_precision: mean(precision),
        macro_recall: mean(recall),
        macro_f1: mean(f1),
        confusion: m,
        support,
        flags,
    }
}

pub fn classification_report(preds: &[usize], labels: &[usize]) -> Result<ClassificationReport, MetricError> {
    Ok(report_from_confusion(confusion_matrix(preds, labels)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based step ahead.
    pub step: usize,
    pub mse: f64,
    pub mae: f64,
    /// `None` when the truth at this step has zero variance.
    pub r2_oos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub n: usize,
    pub per_horizon: Vec<HorizonMetrics>,
    pub overall: HorizonMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub split: String,
    pub regression: Option<RegressionReport>,
    pub movement: Option<ClassificationReport>,
}

/// Model outputs for every anchor of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPredictions {
    pub anchors: Vec<usize>,
    /// Denormalised `k`-step forecasts, row per anchor (regression).
    pub values: Vec<Vec<f64>>,
    /// Predicted class per anchor (movement).
    pub classes: Vec<usize>,
}

pub fn predict_split(model: &Model, data: &Dataset, split: Split, batch_size: usize) -> Result<SplitPredictions, MetricError> {
    let anchors = data.anchors(split).to_vec();
    let mut values = Vec::new();
    let mut classes = Vec::new();
    let k = model.config.output_dim();
    for chunk in anchors.chunks(batch_size.max(1)) {
        let out = model.predict(&data.batch(chunk))?;
        if data.config().task.is_regression() {
            values.extend(
                out.data()
                    .chunks(k)
                    .map(|r| r.iter().map(|&z| data.denormalize_target(z)).collect::<Vec<_>>()),
            );
        } else {
            classes.extend(argmax_rows(&out));
        }
    }
    Ok(SplitPredictions { anchors, values, classes })
}

fn horizon(step: usize, pred: &[f64], truth: &[f64]) -> Result<HorizonMetrics, MetricError> {
    let r2 = match r2_oos(pred, truth) {
        Ok(v) => Some(v),
        Err(MetricError::ZeroVariance) => None,
        Err(e) => return Err(e),
    };
    Ok(HorizonMetrics { step, mse: mse(pred, truth)?, mae: mae(pred, truth)?, r2_oos: r2 })
}

/// Metrics of `model` on one split, in original price units for regression.
pub fn evaluate(model: &Model, data: &Dataset, split: Split, batch_size: usize) -> Result<EvalReport, MetricError> {
    let preds = predict_split(model, data, split, batch_size)?;
    if preds.anchors.is_empty() {
        return Err(MetricError::Empty);
    }
    let task = data.config().task;
    let name = format!("{split:?}").to_lowercase();
    if task.is_regression() {
        let truth: Vec<Vec<f64>> = preds.anchors.iter().map(|&t| data.raw_target(t)).collect();
        let k = data.config().k;
        let mut per_horizon = Vec::with_capacity(k);
        for j in 0..k {
            let p: Vec<f64> = preds.values.iter().map(|r| r[j]).collect();
            let y: Vec<f64> = truth.iter().map(|r| r[j]).collect();
            per_horizon.push(horizon(j + 1, &p, &y)?);
        }
        let p: Vec<f64> = preds.values.concat();
        let y: Vec<f64> = truth.concat();
        let overall = horizon(0, &p, &y)?;
        Ok(EvalReport {
            task,
            split: name,
            regression: Some(RegressionReport { n: preds.anchors.len(), per_horizon, overall }),
            movement: None,
        })
    } else {
        let labels: Vec<usize> = preds
            .anchors
            .iter()
            .map(|&t| data.label(t).expect("movement labels").code())
            .collect();
        Ok(EvalReport {
            task,
            split: name,
            regression: None,
            movement: Some(classification_report(&preds.classes, &labels)?),
        })
    }
}
