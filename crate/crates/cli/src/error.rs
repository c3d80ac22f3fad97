use viewsel_core::annotate::AnnotateError;
use viewsel_core::gateway::GatewayError;
use viewsel_core::metrics::MetricsError;
use viewsel_core::scene::SceneError;
use viewsel_core::selector::SelectorError;
use viewsel_core::strategy::StrategyError;

use crate::config::ConfigError;
use crate::experiment::ExperimentError;

/// Failure of a subcommand, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// A check ran and did not pass (gradient check above tolerance).
    #[error("{0}")]
    CheckFailed(String),
    #[error("config: {0}")]
    Config(String),
    #[error("gateway: {0}")]
    Gateway(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Gateway(_) => 3,
            CliError::Data(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(_) | GatewayError::Template(_) => CliError::Config(e.to_string()),
            other => CliError::Gateway(other.to_string()),
        }
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Gateway(g) => g.into(),
            AnnotateError::Template(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(SceneError, SelectorError, StrategyError, MetricsError, ExperimentError, viewsel_core::nms::NmsError);
