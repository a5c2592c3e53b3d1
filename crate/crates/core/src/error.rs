use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: {detail}")]
    DimensionMismatch { axis: &'static str, detail: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("{what} index {index} out of range 1..={max}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        max: usize,
    },
    #[error("numeric divergence at step {step}")]
    NumericDivergence { step: usize },
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("conditioning error: {0}")]
    Conditioning(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate mask in frame {frame}")]
    DegenerateMask { frame: usize },
    #[error("no visible keypoints in frame {frame}")]
    DegenerateFrame { frame: usize },
}

pub(crate) fn dim_err(axis: &'static str, detail: impl Into<String>) -> Error {
    Error::DimensionMismatch {
        axis,
        detail: detail.into(),
    }
}
