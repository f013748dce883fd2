//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands with incompatible shapes.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand whose shape does not fit the operation.
    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// NaN or infinity produced by a forward primitive.
    #[error("{op}: non-finite value in forward output")]
    NonFinite { op: &'static str },

    /// NaN or infinity produced by a backward rule.
    #[error("{op}: non-finite gradient")]
    NonFiniteGrad { op: &'static str },

    /// `backward` was asked to differentiate a non-scalar.
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    /// Two evaluations of a supposedly deterministic function differed.
    #[error("gradient check: function is not deterministic ({0})")]
    NonDeterministic(String),

    #[error("document '{doc_id}' is empty")]
    EmptyDocument { doc_id: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("unknown token '{0}'")]
    UnknownToken(String),

    #[error("{what} {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteParamGrad(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no evaluable questions (every group was excluded)")]
    NoEvaluableQuestions,

    #[error("count combiner has not been fitted")]
    CombinerNotFitted,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for usage/config problems,
    /// 1 for runtime or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Parse { .. } => 2,
            _ => 1,
        }
    }
}
