//! Operator surface: dataset preparation, training, evaluation and
//! generation commands driven by a flat config file, plus the synthetic
//! toy-corpus generator used by the end-to-end tests.

pub mod cache;
pub mod commands;
pub mod config;
pub mod error;
pub mod toy;

pub use config::RunConfig;
pub use error::CliError;
pub use toy::ToyCorpusSpec;
