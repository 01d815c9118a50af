//! Multi-stage runs from one TOML file: ticks → labels → dataset → train →
//! eval → backtest → sweep.

use std::path::{Path, PathBuf};

use lobforge_core::backtest::{parse_grid, BacktestConfig, SweepRow};
use lobforge_core::dataset::{DatasetConfig, SplitSpec, Task};
use lobforge_core::market_data::SynthConfig;
use lobforge_core::metrics::EvalReport;
use lobforge_core::models::ModelConfig;
use lobforge_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::{manifest_path, read_json, RunManifest};
use crate::stages::{self, BacktestSummary, DeltaSpec, EvalParams, LabelParams, SweepParams, TrainParams};

/// Horizons studied in the original experiments; others are allowed.
pub const USUAL_HORIZONS: [usize; 4] = [20, 30, 50, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Existing CSV or JSONL capture.
    pub ticks: Option<PathBuf>,
    /// Generate synthetic ticks instead.
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelSection {
    pub delta: DeltaSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub task: Task,
    pub lx: usize,
    pub k: usize,
    pub split: SplitSpec,
    pub include_mid: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            task: Task::Movement,
            lx: 96,
            k: 20,
            split: SplitSpec::fraction(0.7, 0.15, 0.15),
            include_mid: false,
        }
    }
}

/// Unset fields take the task defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub early_stop_patience: Option<usize>,
    pub clip_norm: Option<f64>,
}

impl TrainSection {
    pub fn resolve(&self, task: Task, seed: u64) -> TrainConfig {
        let d = TrainConfig::for_task(task);
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            early_stop_patience: self.early_stop_patience.unwrap_or(d.early_stop_patience),
            seed,
            loss: d.loss,
            clip_norm: self.clip_norm.or(d.clip_norm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestSection {
    pub shares: f64,
    pub delay: usize,
    pub cost_rate: f64,
    /// `start:stop:count`; no sweep when absent.
    pub cost_grid: Option<String>,
}

impl Default for BacktestSection {
    fn default() -> Self {
        let d = BacktestConfig::default();
        Self { shares: d.shares, delay: d.delay, cost_rate: d.cost_rate, cost_grid: None }
    }
}

impl BacktestSection {
    pub fn config(&self) -> BacktestConfig {
        BacktestConfig { shares: self.shares, delay: self.delay, cost_rate: self.cost_rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds the dataset, model initialisation and batch order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub label: LabelSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalParams,
    /// Movement task only.
    #[serde(default)]
    pub backtest: Option<BacktestSection>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The config recorded in a pipeline manifest.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let m: RunManifest = read_json(path)?;
        if m.command != "pipeline" {
            return Err(CliError::Config(format!("{} is a {} manifest, not a pipeline one", path.display(), m.command)));
        }
        let cfg: Self = serde_json::from_value(m.config).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.ticks, &self.data.synth) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(CliError::Config("[data] needs exactly one of `ticks` or `synth`".into())),
        }
        if !USUAL_HORIZONS.contains(&self.dataset.k) {
            log::warn!("k = {} is outside the usual horizons {USUAL_HORIZONS:?}", self.dataset.k);
        }
        if self.backtest.is_some() && self.dataset.task != Task::Movement {
            return Err(CliError::Config("[backtest] needs the movement task".into()));
        }
        if let Some(g) = self.backtest.as_ref().and_then(|b| b.cost_grid.as_deref()) {
            parse_grid(g)?;
        }
        stages::parse_split(&self.eval.split)?;
        Ok(())
    }

    fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            task: d.task,
            lx: d.lx,
            k: d.k,
            split: d.split,
            include_mid: d.include_mid,
            seed: self.seed,
        }
    }

    fn train_params(&self) -> TrainParams {
        TrainParams {
            model: ModelConfig { seed: self.seed, ..self.model.clone() },
            train: self.train.resolve(self.dataset.task, self.seed),
        }
    }
}

/// Paths of every artifact a pipeline writes under `out_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub ticks: PathBuf,
    pub labels: PathBuf,
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub report: PathBuf,
    pub signals: PathBuf,
    pub ledger: PathBuf,
    pub equity: PathBuf,
    pub sweep: PathBuf,
    pub manifest: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let o = &cfg.out_dir;
        Self {
            ticks: cfg.data.ticks.clone().unwrap_or_else(|| o.join("ticks.csv")),
            labels: o.join("labels.csv"),
            dataset: o.join("dataset.json"),
            model: o.join("model"),
            report: o.join("report.json"),
            signals: o.join("signals.csv"),
            ledger: o.join("ledger.json"),
            equity: o.join("equity.csv"),
            sweep: o.join("sweep.json"),
            manifest: o.join("pipeline.manifest.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub backtest: Option<BacktestSummary>,
    pub sweep: Option<Vec<SweepRow>>,
    /// Stages skipped because their manifests were current.
    pub reused: Vec<&'static str>,
}

/// A stage can be skipped when its manifest recorded the same command and
/// config and its inputs and outputs are unchanged.
fn reusable<C: Serialize>(artifact: &Path, command: &str, config: &C) -> bool {
    let Ok(m) = RunManifest::read(&manifest_path(artifact)) else {
        return false;
    };
    m.command == command && serde_json::to_value(config).is_ok_and(|c| c == m.config) && m.is_current()
}

/// Runs every stage in order. With `resume`, stages whose manifests are
/// current are skipped.
pub fn run(cfg: &PipelineConfig, resume: bool) -> Result<PipelineOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let paths = Layout::new(cfg);
    let task = cfg.dataset.task;
    let mut reused = Vec::new();
    let mut stage = |name: &'static str, skip: bool, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        if resume && skip {
            log::info!("{name}: up to date");
            reused.push(name);
            return Ok(());
        }
        log::info!("{name}: running");
        f().map_err(|e| e.in_stage(name))
    };

    if let Some(s) = &cfg.data.synth {
        stage("synth", reusable(&paths.ticks, "synth", s), &mut || stages::synth(s, &paths.ticks).map(drop))?;
    } else if !paths.ticks.exists() {
        return Err(CliError::Data(format!("missing input {}", paths.ticks.display())).in_stage("data"));
    }

    let labels = (task == Task::Movement).then_some(paths.labels.as_path());
    if let Some(l) = labels {
        let p = LabelParams { horizon_k: cfg.dataset.k, delta: cfg.label.delta };
        stage("label", reusable(l, "label", &p), &mut || stages::label(&paths.ticks, &p, l).map(drop))?;
    }

    let dc = cfg.dataset_config();
    stage("dataset", reusable(&paths.dataset, "dataset", &dc), &mut || {
        stages::dataset(&paths.ticks, labels, &dc, &paths.dataset).map(drop)
    })?;

    let tp = cfg.train_params();
    let ckpt = paths.model.join("model.ckpt");
    stage("train", reusable(&ckpt, "train", &tp), &mut || {
        stages::train_model(&paths.dataset, &tp, &paths.model).map(drop)
    })?;

    let signals = (task == Task::Movement).then_some(paths.signals.as_path());
    let mut report = None;
    stage("eval", false, &mut || {
        report = Some(stages::eval(&paths.model, &paths.dataset, &cfg.eval, &paths.report, signals)?);
        Ok(())
    })?;

    let (mut backtest, mut sweep) = (None, None);
    if let (Some(b), Some(sig)) = (&cfg.backtest, signals) {
        let bc = b.config();
        stage("backtest", false, &mut || {
            backtest = Some(stages::backtest(sig, &paths.ticks, &bc, &paths.ledger, Some(&paths.equity))?);
            Ok(())
        })?;
        if let Some(g) = &b.cost_grid {
            let sp = SweepParams { backtest: bc, grid: parse_grid(g)? };
            stage("sweep", false, &mut || {
                sweep = Some(stages::sweep(sig, &paths.ticks, &sp, &paths.sweep)?);
                Ok(())
            })?;
        }
    }

    let mut m = RunManifest::new("pipeline", cfg, Some(cfg.seed))?;
    if cfg.data.ticks.is_some() {
        m.input(&paths.ticks)?;
    }
    let mut outputs = vec![&paths.ticks, &paths.dataset, &paths.model, &paths.report];
    if task == Task::Movement {
        outputs.extend([&paths.labels, &paths.signals]);
    }
    if backtest.is_some() {
        outputs.extend([&paths.ledger, &paths.equity]);
    }
    if sweep.is_some() {
        outputs.push(&paths.sweep);
    }
    for o in outputs {
        if cfg.data.ticks.as_ref() != Some(o) {
            m.output(o);
        }
    }
    m.write(&paths.manifest)?;
    Ok(PipelineOutcome {
        report: report.expect("eval stage ran"),
        backtest,
        sweep,
        reused,
    })
}
