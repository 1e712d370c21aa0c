use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] stformer::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{} is locked by another run (remove {} if that run is gone)", .0.display(), .0.join(crate::run::LOCK_FILE).display())]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Exit codes, also listed in the README.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const STATE: u8 = 5;
    pub const DIVERGED: u8 = 6;
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use stformer::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => exit::CONFIG,
            CliError::Io { .. }
            | CliError::Core(
                E::Parse { .. } | E::InsufficientData(_) | E::Horizon(_) | E::Contract(_) | E::UndefinedRate | E::Io(_),
            ) => exit::DATA,
            CliError::Locked(_) | CliError::Core(E::State(_)) => exit::STATE,
            CliError::Core(E::Diverged { .. }) => exit::DIVERGED,
            CliError::Core(_) => exit::OTHER,
        }
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
