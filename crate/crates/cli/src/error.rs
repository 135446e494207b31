use std::path::PathBuf;

use mta_core::attribution::AttributionError;
use mta_core::calibration::CalibrationError;
use mta_core::credit::CreditError;
use mta_core::event_history::EventLogError;
use mta_core::pipeline::PipelineError;
use mta_core::rct::RctError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    InsufficientData(String),
    #[error("missing input {}: {what}", path.display())]
    MissingInput { what: String, path: PathBuf },
    #[error("{0}")]
    DataIntegrity(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::InsufficientData(_) => 3,
            CliError::MissingInput { .. } => 4,
            CliError::DataIntegrity(_) => 5,
            CliError::Io { .. } | CliError::Other(_) => 1,
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::InsufficientData(_) => "InsufficientData",
            CliError::MissingInput { .. } => "MissingInput",
            CliError::DataIntegrity(_) => "DataIntegrityError",
            CliError::Io { .. } => "IoError",
            CliError::Other(_) => "Error",
        }
    }

    /// `error: <Class>: <message>` on one line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error: {}: {msg}", self.class())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }
}

impl From<RctError> for CliError {
    fn from(e: RctError) -> Self {
        match e {
            RctError::Config { .. } => CliError::Config(e.to_string()),
            RctError::DegenerateDesign { .. } => CliError::InsufficientData(e.to_string()),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::Config(_) => CliError::Config(e.to_string()),
            AttributionError::DegenerateLabels { .. } => CliError::InsufficientData(e.to_string()),
            AttributionError::NoTouchpoints { .. } | AttributionError::NotConverting { .. } => {
                CliError::DataIntegrity(e.to_string())
            }
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::InsufficientData { .. } => CliError::InsufficientData(e.to_string()),
            CalibrationError::Config(_) => CliError::Config(e.to_string()),
            CalibrationError::DataIntegrity(_) | CalibrationError::Table(_) => CliError::DataIntegrity(e.to_string()),
            CalibrationError::Solver(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<CreditError> for CliError {
    fn from(e: CreditError) -> Self {
        CliError::DataIntegrity(e.to_string())
    }
}

impl From<EventLogError> for CliError {
    fn from(e: EventLogError) -> Self {
        match e {
            EventLogError::Io(source) => CliError::io("event log", source),
            other => CliError::DataIntegrity(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Attribution(e) => e.into(),
            PipelineError::Calibration(e) => e.into(),
            PipelineError::Credit(e) => e.into(),
        }
    }
}
