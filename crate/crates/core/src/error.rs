use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix `{name}`: {reason}")]
    Matrix { name: String, reason: String },

    #[error("numeric fault at step {step}: {what}")]
    NumericFault { step: usize, what: String },

    #[error("undefined angle: {0}")]
    UndefinedAngle(String),

    #[error("target class {target} out of range for {classes} outputs")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_shape(
    context: &'static str,
    expected: (usize, usize),
    actual: (usize, usize),
) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected: format!("{}x{}", expected.0, expected.1),
            actual: format!("{}x{}", actual.0, actual.1),
        });
    }
    Ok(())
}
