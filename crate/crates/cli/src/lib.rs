//! File formats, run configuration and subcommand drivers for the
//! `anisoline` binary.

pub mod commands;
pub mod config;
pub mod formats;
pub mod svg;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Config(String),
    #[error("unknown problem '{0}', available: {list}", list = anisoline::iga::problems::REGISTRY.join(", "))]
    UnknownProblem(String),
    #[error(transparent)]
    Mesh(#[from] anisoline::mesh::MeshError),
    #[error(transparent)]
    Refine(#[from] anisoline::refine::RefineError),
    #[error(transparent)]
    Space(#[from] anisoline::space::SpaceError),
    #[error(transparent)]
    Fit(#[from] anisoline::fitting::FitError),
    #[error(transparent)]
    Iga(#[from] anisoline::iga::IgaError),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> CliError {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
