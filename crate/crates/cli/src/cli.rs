//! Argument parsing and dispatch for the `lobforge` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lobforge_core::backtest::{parse_grid, BacktestConfig};
use lobforge_core::dataset::{DatasetConfig, SplitSpec, Task};
use lobforge_core::market_data::{StreamConfig, SynthConfig};
use lobforge_core::models::{ModelConfig, ModelKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::pipeline::{self, PipelineConfig, TrainSection};
use crate::stages::{self, DeltaSpec, EvalParams, IngestSource, LabelParams, SweepParams, TrainParams};

#[derive(Debug, Parser)]
#[command(name = "lobforge", version, about = "Limit order book forecasting and backtesting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a capture file or record a TCP feed into CSV/JSONL.
    Ingest(IngestArgs),
    /// Generate synthetic ticks.
    Synth(SynthArgs),
    /// Three-class movement labels.
    Label(LabelArgs),
    /// Windowed, normalised dataset with train/val/test splits.
    Dataset(DatasetArgs),
    /// Train a forecaster.
    Train(TrainArgs),
    /// Metrics on a split, plus trading signals for the movement task.
    Eval(EvalArgs),
    /// Replay signals against mid prices.
    Backtest(BacktestArgs),
    /// Backtest over a grid of cost rates.
    Sweep(SweepArgs),
    /// Every stage from one TOML config.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// CSV or JSONL file to validate.
    #[arg(long, conflicts_with = "stream", required_unless_present = "stream")]
    pub input: Option<PathBuf>,
    /// `host:port` of a JSON-lines depth feed.
    #[arg(long)]
    pub stream: Option<String>,
    /// Output file; `.jsonl` selects JSON lines, anything else CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Reconnect after EOF instead of stopping.
    #[arg(long)]
    pub follow: bool,
    #[arg(long, default_value_t = StreamConfig::default().max_retries)]
    pub max_retries: u32,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with synthetic-market parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_ticks: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub ticks: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Threshold, or `auto` to balance the classes on these ticks.
    #[arg(long, default_value = "auto")]
    pub delta: DeltaSpec,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub ticks: PathBuf,
    /// Required for the movement task.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value = "movement")]
    pub task: Task,
    #[arg(long, default_value_t = 96)]
    pub lx: usize,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// `fraction:TRAIN,VAL,TEST` or `by_day:TRAIN,VAL,TEST`.
    #[arg(long, default_value = "fraction:0.7,0.15,0.15", value_parser = parse_split_spec)]
    pub split: SplitSpec,
    /// Append the mid price as a feature.
    #[arg(long)]
    pub include_mid: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// TOML with optional `[model]` and `[train]` sections; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model directory or checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Write `ts_ms,signal` rows for the evaluated split.
    #[arg(long)]
    pub signals: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TradeArgs {
    #[arg(long)]
    pub signals: PathBuf,
    #[arg(long)]
    pub ticks: PathBuf,
    #[arg(long, default_value_t = BacktestConfig::default().shares)]
    pub shares: f64,
    /// Ticks between a signal and its execution.
    #[arg(long, default_value_t = BacktestConfig::default().delay)]
    pub delay: usize,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[command(flatten)]
    pub trade: TradeArgs,
    #[arg(long, default_value_t = 0.0)]
    pub cost_rate: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-tick `ts_ms,mid,position,equity` CSV.
    #[arg(long)]
    pub equity: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub trade: TradeArgs,
    /// `start:stop:count`, inclusive and evenly spaced.
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-run the config recorded in an earlier `pipeline.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rerun every stage even when its outputs are current.
    #[arg(long)]
    pub fresh: bool,
}

/// `fraction:0.7,0.15,0.15` or `by_day:3,1,1`.
pub fn parse_split_spec(s: &str) -> std::result::Result<SplitSpec, String> {
    let (mode, rest) = s.split_once(':').ok_or_else(|| format!("expected MODE:A,B,C, got {s:?}"))?;
    let parts: Vec<&str> = rest.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three split sizes in {s:?}"));
    }
    match mode {
        "fraction" => {
            let v: Vec<f64> = parts.iter().map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|e| format!("{e}"))?;
            Ok(SplitSpec::fraction(v[0], v[1], v[2]))
        }
        "by_day" => {
            let v: Vec<usize> = parts.iter().map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|e| format!("{e}"))?;
            Ok(SplitSpec::ByDay { train_days: v[0], val_days: v[1], test_days: v[2] })
        }
        _ => Err(format!("unknown split mode {mode:?} (fraction, by_day)")),
    }
}

/// Contents of `train --config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainSection,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(toml::from_str(&text)?)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train_params(args: &TrainArgs, task: Task) -> Result<TrainParams> {
    let mut file: TrainFile = match &args.config {
        Some(p) => read_toml(p)?,
        None => TrainFile::default(),
    };
    let m = &mut file.model;
    if let Some(k) = args.model {
        m.kind = k;
    }
    if let Some(h) = args.hidden {
        m.hidden_dim = h;
    }
    if let Some(l) = args.layers {
        m.n_layers = l;
    }
    let t = &mut file.train;
    t.epochs = args.epochs.or(t.epochs);
    t.lr = args.lr.or(t.lr);
    t.batch_size = args.batch_size.or(t.batch_size);
    t.early_stop_patience = args.patience.or(t.early_stop_patience);
    let seed = args.seed.unwrap_or(file.model.seed);
    file.model.seed = seed;
    Ok(TrainParams { model: file.model, train: file.train.resolve(task, seed) })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => {
            let source = match (a.input, a.stream) {
                (Some(p), None) => IngestSource::File(p),
                (None, Some(s)) => IngestSource::Stream(s),
                _ => return Err(CliError::Config("give exactly one of --input or --stream".into())),
            };
            let cfg = StreamConfig { follow: a.follow, max_retries: a.max_retries, ..Default::default() };
            print_json(&stages::ingest(&source, &a.out, &cfg)?)
        }
        Command::Synth(a) => {
            let mut cfg: SynthConfig = match &a.config {
                Some(p) => read_toml(p)?,
                None => SynthConfig::default(),
            };
            cfg.n_ticks = a.n_ticks.unwrap_or(cfg.n_ticks);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            stages::synth(&cfg, &a.out)?;
            println!("wrote {} ticks to {}", cfg.n_ticks, a.out.display());
            Ok(())
        }
        Command::Label(a) => {
            let p = LabelParams { horizon_k: a.k, delta: a.delta };
            print_json(&stages::label(&a.ticks, &p, &a.out)?)
        }
        Command::Dataset(a) => {
            if !pipeline::USUAL_HORIZONS.contains(&a.k) {
                log::warn!("k = {} is outside the usual horizons {:?}", a.k, pipeline::USUAL_HORIZONS);
            }
            let cfg = DatasetConfig {
                task: a.task,
                lx: a.lx,
                k: a.k,
                split: a.split,
                include_mid: a.include_mid,
                seed: a.seed,
            };
            let meta = stages::dataset(&a.ticks, a.labels.as_deref(), &cfg, &a.out)?;
            println!(
                "wrote {} (train {}, val {}, test {})",
                a.out.display(),
                meta.counts[0],
                meta.counts[1],
                meta.counts[2]
            );
            Ok(())
        }
        Command::Train(a) => {
            let data = stages::load_dataset(&a.dataset)?;
            let params = train_params(&a, data.config().task)?;
            drop(data);
            print_json(&stages::train_model(&a.dataset, &params, &a.out_dir)?)
        }
        Command::Eval(a) => {
            let p = EvalParams { split: a.split, batch_size: a.batch_size };
            print_json(&stages::eval(&a.model, &a.dataset, &p, &a.out, a.signals.as_deref())?)
        }
        Command::Backtest(a) => {
            let t = a.trade;
            let cfg = BacktestConfig { shares: t.shares, delay: t.delay, cost_rate: a.cost_rate };
            print_json(&stages::backtest(&t.signals, &t.ticks, &cfg, &a.out, a.equity.as_deref())?)
        }
        Command::Sweep(a) => {
            let t = a.trade;
            let p = SweepParams {
                backtest: BacktestConfig { shares: t.shares, delay: t.delay, cost_rate: 0.0 },
                grid: parse_grid(&a.grid)?,
            };
            print_json(&stages::sweep(&t.signals, &t.ticks, &p, &a.out)?)
        }
        Command::Pipeline(a) => {
            let mut cfg = match (&a.config, &a.manifest) {
                (Some(c), None) => PipelineConfig::load(c)?,
                (None, Some(m)) => PipelineConfig::from_manifest(m)?,
                _ => return Err(CliError::Config("give exactly one of --config or --manifest".into())),
            };
            if let Some(o) = a.out_dir {
                cfg.out_dir = o;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let outcome = pipeline::run(&cfg, !a.fresh)?;
            print_json(&outcome.report)?;
            if let Some(b) = &outcome.backtest {
                print_json(b)?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn split_specs() {
        assert_eq!(parse_split_spec("fraction:0.6,0.2,0.2").unwrap(), SplitSpec::fraction(0.6, 0.2, 0.2));
        assert_eq!(
            parse_split_spec("by_day:3,1,1").unwrap(),
            SplitSpec::ByDay { train_days: 3, val_days: 1, test_days: 1 }
        );
        for bad in ["0.6,0.2,0.2", "fraction:0.5,0.5", "weekly:1,1,1", "by_day:1.5,1,1"] {
            assert!(parse_split_spec(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn flags_override_train_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.toml");
        std::fs::write(&p, "[model]\nkind = \"dlstm\"\nhidden_dim = 12\n[train]\nlr = 0.01\nepochs = 4\n").unwrap();
        let cli = Cli::try_parse_from([
            "lobforge", "train", "--dataset", "d.json", "--config", p.to_str().unwrap(), "--epochs", "2", "--seed", "9",
            "--out-dir", "m",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!("parsed as another command") };
        let params = train_params(&a, Task::Movement).unwrap();
        assert_eq!(params.model.kind, ModelKind::Dlstm);
        assert_eq!(params.model.hidden_dim, 12);
        assert_eq!(params.model.seed, 9);
        assert_eq!(params.train.epochs, 2);
        assert_eq!(params.train.lr, 0.01);
        assert_eq!(params.train.seed, 9);
        assert_eq!(params.train.batch_size, 64);
    }
}
