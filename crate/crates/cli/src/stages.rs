//! The work behind each subcommand. Every function writes its artifacts and
//! exactly one manifest next to the primary output.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lobforge_autodiff::checkpoint;
use lobforge_core::backtest::{
    cost_sweep, read_signals, run_backtest, signals_from_predictions, write_equity_csv, write_signals,
    BacktestConfig, BacktestLedger, SweepRow,
};
use lobforge_core::dataset::{Dataset, DatasetConfig, DatasetMeta, Split, Task};
use lobforge_core::labeling::{calibrate_threshold, label_series, read_labels, write_labels, LabelConfig, LabelSeries};
use lobforge_core::market_data::{
    collect_stream, read_snapshots, synth_lob, write_snapshots, FileSink, Format, IngestReport, StreamConfig,
    SynthConfig, TickSeries,
};
use lobforge_core::metrics::{evaluate, predict_split, EvalReport};
use lobforge_core::models::{HeadKind, Model, ModelConfig};
use lobforge_core::train::{train, TrainConfig, TrainHistory};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::{manifest_path, read_json, sha256_file, write_json, RunManifest};

pub fn read_ticks(path: &Path) -> Result<TickSeries> {
    Ok(read_snapshots(path, Format::from_path(path))?)
}

pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<RunManifest> {
    let series = synth_lob(cfg)?;
    write_snapshots(out, &series, Format::from_path(out))?;
    let mut m = RunManifest::new("synth", cfg, Some(cfg.seed))?;
    m.output(out);
    m.write(&manifest_path(out))?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestSource {
    /// A CSV or JSONL capture, validated and rewritten.
    File(PathBuf),
    /// A `host:port` feed of JSON depth lines.
    Stream(String),
}

pub fn ingest(source: &IngestSource, out: &Path, stream: &StreamConfig) -> Result<IngestReport> {
    let format = Format::from_path(out);
    let report = match source {
        IngestSource::File(p) => {
            let series = read_ticks(p)?;
            write_snapshots(out, &series, format)?;
            IngestReport { rows: series.len(), ..Default::default() }
        }
        IngestSource::Stream(addr) => {
            let mut sink = FileSink::create(out, format)?;
            collect_stream(addr, &mut sink, stream)?
        }
    };
    #[derive(Serialize)]
    struct Cfg<'a> {
        source: &'a IngestSource,
        stream: &'a StreamConfig,
    }
    let mut m = RunManifest::new("ingest", &Cfg { source, stream }, None)?;
    if let IngestSource::File(p) = source {
        m.input(p)?;
    }
    m.output(out);
    m.with_summary(&report)?.write(&manifest_path(out))?;
    Ok(report)
}

/// Stationary-band threshold: a fixed value or calibrated for balance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "DeltaRepr", into = "DeltaRepr")]
pub enum DeltaSpec {
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DeltaRepr {
    Fixed(f64),
    Named(String),
}

impl TryFrom<DeltaRepr> for DeltaSpec {
    type Error = String;

    fn try_from(r: DeltaRepr) -> std::result::Result<Self, String> {
        match r {
            DeltaRepr::Fixed(v) => Ok(DeltaSpec::Fixed(v)),
            DeltaRepr::Named(s) => s.parse(),
        }
    }
}

impl From<DeltaSpec> for DeltaRepr {
    fn from(d: DeltaSpec) -> Self {
        match d {
            DeltaSpec::Auto => DeltaRepr::Named("auto".into()),
            DeltaSpec::Fixed(v) => DeltaRepr::Fixed(v),
        }
    }
}

impl FromStr for DeltaSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(DeltaSpec::Auto);
        }
        s.parse().map(DeltaSpec::Fixed).map_err(|_| format!("delta must be \"auto\" or a number, got {s:?}"))
    }
}

impl fmt::Display for DeltaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeltaSpec::Auto => write!(f, "auto"),
            DeltaSpec::Fixed(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub horizon_k: usize,
    pub delta: f64,
    pub valid: usize,
    pub shares: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelParams {
    pub horizon_k: usize,
    pub delta: DeltaSpec,
}

pub fn label(ticks: &Path, params: &LabelParams, out: &Path) -> Result<LabelSummary> {
    let LabelParams { horizon_k, delta } = *params;
    let series = read_ticks(ticks)?;
    let resolved = match delta {
        DeltaSpec::Auto => calibrate_threshold(&series, horizon_k)?.delta,
        DeltaSpec::Fixed(d) => d,
    };
    let labels = label_series(&series, &LabelConfig { horizon_k, delta: resolved })?;
    write_labels(out, &labels)?;
    let summary = LabelSummary { horizon_k, delta: resolved, valid: labels.valid_count(), shares: labels.shares() };
    let mut m = RunManifest::new("label", params, None)?;
    m.input(ticks)?;
    m.output(out);
    m.with_summary(&summary)?.write(&manifest_path(out))?;
    Ok(summary)
}

/// Reads a labels file together with the horizon and δ its manifest recorded.
pub fn read_label_file(path: &Path) -> Result<LabelSeries> {
    let mpath = manifest_path(path);
    if !mpath.exists() {
        return Err(CliError::Config(format!(
            "{} has no manifest; label it with `lobforge label` so horizon and delta are known",
            path.display()
        )));
    }
    let summary: LabelSummary = serde_json::from_value(
        RunManifest::read(&mpath)?
            .summary
            .ok_or_else(|| CliError::Data(format!("{} has no summary", mpath.display())))?,
    )?;
    Ok(read_labels(path, &LabelConfig { horizon_k: summary.horizon_k, delta: summary.delta })?)
}

/// The dataset artifact: where the ticks and labels live and the fitted
/// statistics, from which the windows are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub ticks: String,
    pub ticks_sha256: String,
    pub labels: Option<String>,
    pub labels_sha256: Option<String>,
    pub meta: DatasetMeta,
}

pub fn dataset(ticks: &Path, labels: Option<&Path>, cfg: &DatasetConfig, out: &Path) -> Result<DatasetMeta> {
    if cfg.task == Task::Movement && labels.is_none() {
        return Err(CliError::Config("the movement task needs --labels".into()));
    }
    let series = read_ticks(ticks)?;
    let label_series = labels.map(read_label_file).transpose()?;
    if let Some(l) = &label_series {
        if l.horizon_k != cfg.k {
            return Err(CliError::Config(format!("labels use k = {}, dataset asks for k = {}", l.horizon_k, cfg.k)));
        }
    }
    let built = Dataset::build(&series, label_series.as_ref(), cfg)?;
    let file = DatasetFile {
        ticks: ticks.to_string_lossy().into_owned(),
        ticks_sha256: sha256_file(ticks)?,
        labels: labels.map(|p| p.to_string_lossy().into_owned()),
        labels_sha256: labels.map(sha256_file).transpose()?,
        meta: built.meta.clone(),
    };
    write_json(out, &file)?;
    let mut m = RunManifest::new("dataset", cfg, Some(cfg.seed))?;
    m.input(ticks)?;
    if let Some(l) = labels {
        m.input(l)?;
    }
    m.output(out);
    m.with_summary(&built.meta.counts)?.write(&manifest_path(out))?;
    Ok(built.meta)
}

/// Rebuilds a dataset and checks it against the stored statistics.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file: DatasetFile = read_json(path)?;
    let ticks = Path::new(&file.ticks);
    if sha256_file(ticks)? != file.ticks_sha256 {
        return Err(CliError::Data(format!("{} changed since the dataset was built", ticks.display())));
    }
    let labels = match (&file.labels, &file.labels_sha256) {
        (Some(p), Some(h)) => {
            let p = Path::new(p);
            if &sha256_file(p)? != h {
                return Err(CliError::Data(format!("{} changed since the dataset was built", p.display())));
            }
            Some(read_label_file(p)?)
        }
        _ => None,
    };
    let data = Dataset::build(&read_ticks(ticks)?, labels.as_ref(), &file.meta.config)?;
    if data.meta != file.meta {
        return Err(CliError::Invariant(format!("rebuilt dataset differs from {}", path.display())));
    }
    Ok(data)
}

/// Stored next to the checkpoint: everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub history: TrainHistory,
}

/// Fills the data-dependent model fields from the dataset.
pub fn fit_model_config(model: &ModelConfig, data: &Dataset) -> ModelConfig {
    let c = data.config();
    ModelConfig {
        input_dim: data.dim(),
        lx: c.lx,
        k: c.k,
        head: if c.task.is_regression() { HeadKind::RegressionSeq } else { HeadKind::Movement },
        ..model.clone()
    }
}

/// The model fields that `dataset` does not determine, and the trainer
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn train_model(dataset_path: &Path, params: &TrainParams, out_dir: &Path) -> Result<TrainHistory> {
    let cfg = &params.train;
    let data = load_dataset(dataset_path)?;
    let model_cfg = fit_model_config(&params.model, &data);
    let mut m = Model::new(model_cfg.clone())?;
    let history = train(&mut m, &data, cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join("model.ckpt");
    let meta = out_dir.join("model.json");
    checkpoint::save(&ckpt, &m.params)?;
    write_json(&meta, &ModelFile { model: model_cfg.clone(), train: cfg.clone(), history: history.clone() })?;
    let mut man = RunManifest::new("train", params, Some(cfg.seed))?;
    man.input(dataset_path)?;
    man.output(&ckpt);
    man.output(&meta);
    man.with_summary(&history)?.write(&manifest_path(&ckpt))?;
    Ok(history)
}

/// Accepts the training output directory or the checkpoint inside it.
pub fn load_model(path: &Path) -> Result<Model> {
    let ckpt = if path.is_dir() { path.join("model.ckpt") } else { path.to_path_buf() };
    let file: ModelFile = read_json(&ckpt.with_file_name("model.json"))?;
    let mut model = Model::new(file.model)?;
    checkpoint::restore_into(&mut model.params, &checkpoint::load(&ckpt)?)?;
    Ok(model)
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(CliError::Config(format!("unknown split {s:?}"))),
    }
}

fn split_range(meta: &DatasetMeta, split: Split) -> std::ops::Range<usize> {
    match split {
        Split::Train => meta.splits.train.clone(),
        Split::Val => meta.splits.val.clone(),
        Split::Test => meta.splits.test.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    pub split: String,
    pub batch_size: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { split: "test".into(), batch_size: 256 }
    }
}

pub fn eval(model_path: &Path, dataset_path: &Path, params: &EvalParams, out: &Path, signals: Option<&Path>) -> Result<EvalReport> {
    let split = parse_split(&params.split)?;
    let batch_size = params.batch_size;
    if batch_size == 0 {
        return Err(CliError::Config("batch_size must be >= 1".into()));
    }
    let model = load_model(model_path)?;
    let data = load_dataset(dataset_path)?;
    if fit_model_config(&model.config, &data) != model.config {
        return Err(CliError::Config("model was trained on a differently shaped dataset".into()));
    }
    let report = evaluate(&model, &data, split, batch_size)?;
    write_json(out, &report)?;
    let mut m = RunManifest::new("eval", params, None)?;
    m.input(&model_path_ckpt(model_path))?;
    m.input(dataset_path)?;
    m.output(out);
    if let Some(sig) = signals {
        if data.config().task != Task::Movement {
            return Err(CliError::Config("signals need a movement model".into()));
        }
        let preds = predict_split(&model, &data, split, batch_size)?;
        let per_tick = signals_from_predictions(data.ts.len(), &preds.anchors, &preds.classes);
        let range = split_range(&data.meta, split);
        write_signals(sig, &data.ts[range.clone()], &per_tick[range])?;
        m.output(sig);
    }
    m.write(&manifest_path(out))?;
    Ok(report)
}

fn model_path_ckpt(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.ckpt")
    } else {
        p.to_path_buf()
    }
}

/// Signals aligned to the matching run of ticks.
fn aligned(signals: &Path, ticks: &Path) -> Result<(Vec<i64>, Vec<f64>, Vec<lobforge_core::labeling::MovementLabel>)> {
    let (sts, sig) = read_signals(signals)?;
    let series = read_ticks(ticks)?;
    let ts = series.timestamps();
    let start = ts
        .binary_search(&sts[0])
        .map_err(|_| CliError::Data(format!("signal timestamp {} is not a tick", sts[0])))?;
    let end = start + sts.len();
    if end > ts.len() || ts[start..end] != sts[..] {
        return Err(CliError::Data("signal timestamps do not match a contiguous run of ticks".into()));
    }
    Ok((sts, series.mids()[start..end].to_vec(), sig))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub cpr: f64,
    pub sharpe: Option<f64>,
    pub n_trades: usize,
    pub n_ticks: usize,
}

#[derive(Serialize)]
struct LedgerFile<'a> {
    summary: &'a BacktestSummary,
    ledger: &'a BacktestLedger,
}

pub fn backtest(
    signals: &Path,
    ticks: &Path,
    cfg: &BacktestConfig,
    out: &Path,
    equity: Option<&Path>,
) -> Result<BacktestSummary> {
    let (ts, mids, sig) = aligned(signals, ticks)?;
    let ledger = run_backtest(&sig, &mids, &ts, cfg)?;
    let summary = BacktestSummary {
        cpr: ledger.cpr(),
        sharpe: ledger.sharpe().ok(),
        n_trades: ledger.trades.len(),
        n_ticks: ts.len(),
    };
    write_json(out, &LedgerFile { summary: &summary, ledger: &ledger })?;
    let mut m = RunManifest::new("backtest", cfg, None)?;
    m.input(signals)?;
    m.input(ticks)?;
    m.output(out);
    if let Some(e) = equity {
        write_equity_csv(e, &ledger, &mids)?;
        m.output(e);
    }
    m.with_summary(&summary)?.write(&manifest_path(out))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    pub backtest: BacktestConfig,
    pub grid: Vec<f64>,
}

pub fn sweep(signals: &Path, ticks: &Path, params: &SweepParams, out: &Path) -> Result<Vec<SweepRow>> {
    let (ts, mids, sig) = aligned(signals, ticks)?;
    let rows = cost_sweep(&sig, &mids, &ts, &params.backtest, &params.grid)?;
    write_json(out, &rows)?;
    let mut m = RunManifest::new("sweep", params, None)?;
    m.input(signals)?;
    m.input(ticks)?;
    m.output(out);
    m.write(&manifest_path(out))?;
    Ok(rows)
}
