use vbsens::Error;

/// Failure classes, one per process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Convergence(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Convergence(_) => 2,
            CliError::Degenerate(_) => 3,
        }
    }

    /// Engine errors raised while building objects from the config.
    pub fn config(e: Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Validation(_) | Error::Dimension { .. } | Error::Unsupported(_) => CliError::Config(msg),
            Error::IllConditioned { .. }
            | Error::Numerical(_)
            | Error::Accuracy(_)
            | Error::Precision(_)
            | Error::Sampler(_) => CliError::Convergence(msg),
            Error::Unreliable { .. } | Error::Divergent { .. } | Error::Domain(_) | Error::PriorPositivity { .. } => {
                CliError::Degenerate(msg)
            }
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Config(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(format!("json: {e}"))
    }
}

/// Worst exit code seen over a command's sub-steps.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ExitStatus(pub i32);

impl ExitStatus {
    pub fn record(&mut self, e: &CliError) {
        self.0 = self.0.max(e.exit_code());
    }
}
