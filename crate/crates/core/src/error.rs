//! Error type shared across the crate.

/// Convenience alias used by every fallible operation in this crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A value that must be finite turned out NaN or infinite. `index` points
    /// at the offending batch row when the operation is row-structured.
    #[error("non-finite value in {context}{}", fmt_index(.index))]
    NonFinite { context: String, index: Option<usize> },

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("pseudo-labels cover {have} samples but index {index} was requested")]
    PseudoCoverage { have: usize, index: usize },

    #[error("empty input in {context}")]
    EmptyData { context: String },

    #[error("degenerate clustering: every class centroid is empty")]
    DegenerateClusters,

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid state: {0}")]
    State(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

fn fmt_index(index: &Option<usize>) -> String {
    match index {
        Some(i) => format!(" (batch row {i})"),
        None => String::new(),
    }
}
