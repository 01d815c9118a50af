use lobforge_autodiff::NnError;
use lobforge_core::backtest::BacktestError;
use lobforge_core::dataset::DatasetError;
use lobforge_core::labeling::LabelError;
use lobforge_core::market_data::MarketDataError;
use lobforge_core::metrics::MetricError;
use lobforge_core::models::ModelError;
use lobforge_core::train::TrainError;

/// Every failure a command can report, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("stage {stage} failed: {source}")]
    Stage { stage: &'static str, source: Box<CliError> },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Invariant(_) => 5,
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        CliError::Stage { stage, source: Box::new(self) }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MarketDataError> for CliError {
    fn from(e: MarketDataError) -> Self {
        match e {
            MarketDataError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidConfig(_) | DatasetError::InfeasibleSplit(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Format(_) | NnError::Io(_) => CliError::Data(e.to_string()),
            _ => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Config(m),
            ModelError::Nn(e) => e.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => CliError::Config(m),
            TrainError::EmptySplit(_) => CliError::Data(e.to_string()),
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Model(e) => e.into(),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Model(e) => e.into(),
            MetricError::InvalidLabel(_) => CliError::Invariant(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BacktestError> for CliError {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::InvalidConfig(_) | BacktestError::InvalidGrid(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
