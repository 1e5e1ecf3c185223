use crate::ablation::ParseError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] puyun_core::Error),

    #[error(transparent)]
    Ablation(#[from] ParseError),

    /// Some finite-difference check exceeded its tolerance.
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl CliError {
    /// 0 success, 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        use puyun_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Ablation(_) => 1,
            CliError::GradCheck(_) => 3,
            CliError::Core(e) => match e {
                E::Usage(_) | E::Config(_) | E::Range(_) => 1,
                E::Shape(_) | E::Data(_) | E::Io(_) | E::Json(_) => 2,
                E::Numeric { .. } => 3,
            },
        }
    }
}
