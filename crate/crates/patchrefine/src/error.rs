use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("patch size {patch_size} does not divide side {side}")]
    NotDivisible { side: usize, patch_size: usize },

    #[error("{0} must not be empty")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "missing pseudo-labels for sample {sample_id} at patch size {patch_size}; \
         run the `pseudo` command first"
    )]
    MissingPseudoLabels { sample_id: String, patch_size: usize },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("sample {sample_id} appears in more than one data role")]
    RoleOverlap { sample_id: String },

    #[error("data-role violation: {0}")]
    RoleViolation(String),

    #[error("output directory {0} is locked by another invocation")]
    Locked(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("{0}")]
    Internal(String),
}

impl Error {
    /// Process exit code for the CLI: 0 ok, 2 config error, 3 missing
    /// prerequisite, 4 missing artifact, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::NotDivisible { .. } => 2,
            Error::MissingPrerequisite(_) | Error::MissingPseudoLabels { .. } => 3,
            Error::MissingArtifact(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
