use confdepth::confidence_head::HeadError;
use confdepth::ensemble_confidence::ConfidenceError;
use confdepth::losses::LossError;
use confdepth::map_io::MapIoError;
use confdepth::metrics_eval::MetricsError;
use confdepth::refine_experiment::ExperimentError;
use confdepth::synthetic_data::SynthError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for bad or missing data, 4 for
    /// numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<MapIoError> for CliError {
    fn from(e: MapIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ConfidenceError> for CliError {
    fn from(e: ConfidenceError) -> Self {
        match e {
            ConfidenceError::Parameter(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Config(_) => CliError::Config(e.to_string()),
            LossError::InvalidDepth(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<HeadError> for CliError {
    fn from(e: HeadError) -> Self {
        match e {
            HeadError::Validation(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Scaling(_) | MetricsError::NonPositive(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(m) => CliError::Config(m),
            ExperimentError::Data(m) => CliError::Data(m),
            ExperimentError::Numeric(m) => CliError::Numeric(m),
            ExperimentError::Loss(e) => e.into(),
            ExperimentError::Confidence(e) => e.into(),
            ExperimentError::Head(e) => e.into(),
            ExperimentError::Metrics(e) => e.into(),
            ExperimentError::Map(e) => e.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
