//! CLI error type. Every failure maps to one machine-parsable line on
//! stderr: `error: <kind>: <message>`.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Midi { path: PathBuf, message: String },
    #[error("{0}")]
    Codec(#[from] midi_vae::roll_codec::CodecError),
    #[error("{0}")]
    Model(#[from] midi_vae::model::ModelError),
    #[error("{0}")]
    Eval(#[from] midi_vae::eval::EvalError),
    #[error("{0}")]
    StyleOps(#[from] midi_vae::style_ops::StyleOpsError),
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: midi_vae::checkpoint::CheckpointError,
    },
    #[error("style {requested} is not in the checkpoint (styles: {available})")]
    StyleMismatch {
        requested: String,
        available: String,
    },
    #[error("source and target style must differ")]
    SameStyle,
    #[error("no cached dataset at {0}; run `prepare` first")]
    MissingCache(PathBuf),
    #[error("style directory {0} produced no usable songs")]
    EmptyStyle(String),
    #[error("{0}")]
    BadCache(String),
}

impl CliError {
    /// Stable machine-parsable kind string.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Midi { .. } => "midi",
            CliError::Codec(_) => "codec",
            CliError::Model(_) => "model",
            CliError::Eval(_) => "eval",
            CliError::StyleOps(_) => "style-ops",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::StyleMismatch { .. } => "style-mismatch",
            CliError::SameStyle => "same-style",
            CliError::MissingCache(_) => "missing-cache",
            CliError::EmptyStyle(_) => "empty-style",
            CliError::BadCache(_) => "bad-cache",
        }
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
