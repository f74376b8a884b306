use thiserror::Error;

/// Failures mapped onto process exit codes by [`CliError::exit_code`].
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("input {path}: {source}")]
    Input {
        path: String,
        #[source]
        source: tgpp::Error,
    },

    #[error(transparent)]
    Model(#[from] tgpp::Error),

    #[error("writing {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for bad configuration or input, 3 for numerical failures, 1 for
    /// everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Input { .. } => 2,
            CliError::Model(e) if e.is_numerical() => 3,
            CliError::Model(tgpp::Error::Io(_)) => 1,
            CliError::Model(_) => 2,
            CliError::Output { .. } => 1,
        }
    }
}
