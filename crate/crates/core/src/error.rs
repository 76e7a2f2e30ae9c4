use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("coordinate out of range at line {line}")]
    RangeError { line: usize },
    #[error("grid cell size must be positive, got {0}")]
    InvalidCellSize(f64),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("sample ({lon}, {lat}) lies outside the raster bounds")]
    SampleOutOfBounds { lon: f64, lat: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid pooling grid {gy}x{gx} for a {h}x{w} plane")]
    InvalidGrid { gy: usize, gx: usize, h: usize, w: usize },
    #[error("loss must be a scalar, got {0} elements")]
    NotScalar(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("empty input")]
    EmptyInput,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("raster is not square ({h}x{w})")]
    NonSquare { h: usize, w: usize },
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
