use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}expected {expected}, got {actual}", layer_prefix(.layer))]
    Shape {
        layer: Option<usize>,
        expected: String,
        actual: String,
    },

    #[error("output index {index} out of range for {len} outputs")]
    Index { index: usize, len: usize },

    #[error("invalid line query: {0}")]
    Query(String),

    #[error("ratio {0} outside [0, 1]")]
    Range(f64),

    #[error("sample count must be at least 1")]
    Count,

    #[error("{0}")]
    Undefined(String),

    #[error("{0}")]
    Degenerate(String),

    #[error("{0}")]
    Dimension(String),

    #[error("layer {layer} ({kind}) is not supported by {operation}")]
    UnsupportedLayer {
        layer: usize,
        kind: &'static str,
        operation: &'static str,
    },

    #[error("non-finite value in {0}")]
    Value(String),

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn layer_prefix(layer: &Option<usize>) -> String {
    match layer {
        Some(i) => format!("layer {i}: "),
        None => String::new(),
    }
}

impl Error {
    /// Stable one-word identifier used in diagnostics and exit-code mapping.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape-error",
            Error::Index { .. } => "index-error",
            Error::Query(_) => "query-error",
            Error::Range(_) => "range-error",
            Error::Count => "count-error",
            Error::Undefined(_) => "undefined-error",
            Error::Degenerate(_) => "degenerate-error",
            Error::Dimension(_) => "dimension-error",
            Error::UnsupportedLayer { .. } => "unsupported-layer",
            Error::Value(_) => "value-error",
            Error::Parse { .. } => "parse-error",
            Error::Schema(_) => "schema-error",
            Error::Io(_) => "io-error",
        }
    }

    pub(crate) fn shape(
        layer: Option<usize>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Shape {
            layer,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
