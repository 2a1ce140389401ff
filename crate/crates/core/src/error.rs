use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("index out of bounds in {op}: index {index} with limit {limit}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("degenerate geometry: atoms {a} and {b} closer than {min_dist} A")]
    DegenerateGeometry { a: usize, b: usize, min_dist: f64 },

    #[error("unknown species id {species}; known: {known:?}")]
    UnknownSpecies { species: u32, known: Vec<u32> },

    #[error("quantized tensor '{name}' is missing quantization parameters")]
    MissingQuantParams { name: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("split fraction {fraction} yields an empty subset for a dataset of {len} items")]
    EmptySplit { fraction: f64, len: usize },

    #[error("position sampling failed after {attempts} attempts (seed {seed}); the packing constraints are infeasible")]
    SamplingFailed { attempts: usize, seed: u64 },

    #[error("XYZ parse error at line {line}, column {column}: {detail}")]
    XyzParse {
        line: usize,
        column: usize,
        detail: String,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("training aborted: loss term '{term}' is NaN at epoch {epoch}")]
    NanLoss { epoch: usize, term: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
