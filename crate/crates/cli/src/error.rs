//! CLI error type: every failure carries a stable machine-readable code
//! that `main` serializes as `{"error": {"code", "message"}}` on stderr.

use std::path::PathBuf;

use thiserror::Error;

use pixie_core::eval::EvalError;
use pixie_core::grid::GridError;
use pixie_core::io::IoError;
use pixie_core::materials::MaterialError;
use pixie_core::mpm::MpmError;
use pixie_core::predictor::PredictorError;
use pixie_core::segmentation::SegmentError;
use pixie_core::synth::SynthError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: IoError,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Segmentation(#[from] SegmentError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Simulation(#[from] MpmError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    /// Stable error code for the machine-readable stderr payload.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Io(_) | CliError::File { .. } => "io",
            CliError::Json { .. } => "json",
            CliError::Format { .. } => "format",
            CliError::Grid(_) => "grid",
            CliError::Material(_) => "material",
            CliError::Segmentation(_) => "segmentation",
            CliError::Predictor(_) => "predictor",
            CliError::Simulation(_) => "simulation",
            CliError::Synth(_) => "synth",
            CliError::Eval(_) => "eval",
        }
    }

    /// Annotates an i/o failure with the path it happened on.
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::File {
            path: path.into(),
            source,
        }
    }

    /// Annotates a grid/model/trajectory codec failure with its path.
    /// Plain file-system failures unwrap back to the `io` code so that a
    /// missing file is not misreported as a malformed one.
    pub fn format_at(path: impl Into<PathBuf>, source: IoError) -> Self {
        match source {
            IoError::Io(inner) => CliError::File {
                path: path.into(),
                source: inner,
            },
            other => CliError::Format {
                path: path.into(),
                source: other,
            },
        }
    }
}
