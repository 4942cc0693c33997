use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("dtype mismatch in {op}: {lhs} vs {rhs}")]
    DType {
        op: &'static str,
        lhs: &'static str,
        rhs: &'static str,
    },

    #[error("length mismatch in {op}: {lhs} vs {rhs}")]
    Length {
        op: &'static str,
        lhs: usize,
        rhs: usize,
    },

    #[error("non-finite value {value} at flat index {index} in {op}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("degenerate denominator b(z) at {}: z = {z}", row.map_or("contraction".to_string(), |r| format!("row {r}")))]
    DegenerateDenominator { row: Option<usize>, z: f64 },

    #[error("stream state mismatch: {0}")]
    StateMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid multiplicity {value} at gene {index}")]
    Multiplicity { index: usize, value: f64 },

    #[error("index out of range: {what} {index} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("score tile of {used} elements exceeds the configured g_y x s_x = {limit}")]
    TileOverflow { used: usize, limit: usize },

    #[error("out of memory: cannot materialize {bytes} bytes for {what}")]
    OutOfMemory { what: &'static str, bytes: u128 },

    #[error("operation {0} is not representable in exact rational arithmetic")]
    Inexact(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
