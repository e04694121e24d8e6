use thiserror::Error;

/// Errors raised by kernels, layers and the training engines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: precision mismatch ({left} vs {right})")]
    PrecisionMismatch {
        op: &'static str,
        left: &'static str,
        right: &'static str,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("memory ledger corrupted: {0}")]
    LedgerCorruption(String),

    #[error("neuron state not reset: {0}")]
    UnresetState(String),

    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
