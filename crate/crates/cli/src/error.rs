use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const VERSION: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] aapl_core::Error),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use aapl_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
            CliError::Core(e) => match e {
                E::Numeric(_) | E::Degenerate(_) => exit::NUMERIC,
                E::Version { .. } => exit::VERSION,
                E::Config(_)
                | E::Contract(_)
                | E::Dimension(_)
                | E::Index(_)
                | E::Io(_)
                | E::Json(_) => exit::CONFIG,
            },
        }
    }
}
