use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{context}: length {len} outside 1..={max}")]
    Length {
        context: &'static str,
        len: usize,
        max: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate normalization scale: {0}")]
    DegenerateScale(String),

    #[error("NMSE undefined: reference channel is all zeros")]
    ZeroReference,

    #[error(
        "training diverged at step {step} (last finite loss {last_finite_loss:e} at step {last_finite_step})"
    )]
    Divergence {
        step: u64,
        last_finite_step: u64,
        last_finite_loss: f64,
    },

    #[error("{model} does not accept context length {len}")]
    UnsupportedLength { model: String, len: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(
        context: &'static str,
        expected: impl core::fmt::Display,
        actual: impl core::fmt::Display,
    ) -> Self {
        use alloc::string::ToString;
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
