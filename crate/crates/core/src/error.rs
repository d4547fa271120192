use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input contains no points")]
    EmptyInput,
    #[error("row {row}: non-finite coordinate")]
    NonFiniteCoordinate { row: usize },
    #[error("row {row}: feature width differs from the first row")]
    RaggedFeatures { row: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxelSize(f64),
    #[error("invalid grid bounds: {0}")]
    InvalidBounds(String),
    #[error(
        "voxel key space overflows 2^63 (batch_count={batch_count}, axis_counts={axis_counts:?})"
    )]
    KeySpaceOverflow {
        batch_count: u64,
        axis_counts: [f64; 3],
    },
    #[error("row {row}: point lies outside the grid bounds")]
    PointOutOfBounds { row: usize },
    #[error("batch id {batch} is outside the grid's batch count {batch_count}")]
    BatchOutOfRange { batch: u64, batch_count: u64 },

    #[error("neighborhood size must be odd and positive, got {0}")]
    EvenNeighborSize(usize),
    #[error("sampled points are not voxel-unique: key {key} appears at rows {first} and {second}")]
    NonUniqueSampledVoxel {
        key: u64,
        first: usize,
        second: usize,
    },

    #[error("row {row}: segment id {id} outside [0, {segment_count})")]
    SegmentIdOutOfRange {
        row: usize,
        id: usize,
        segment_count: usize,
    },
    #[error("segment {0} has no rows")]
    EmptySegment(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature transform returned {got} rows for {expected} input rows")]
    TransformRowCountMismatch { expected: usize, got: usize },
    #[error("layer {0} produced no points")]
    EmptyLayer(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset has no frames")]
    EmptyDataset,

    #[error("m={m} outside [1, {n}]")]
    MOutOfRange { m: usize, n: usize },
    #[error("k={k} outside [1, {n}]")]
    KOutOfRange { k: usize, n: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("file contains no points")]
    EmptyFile,
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Failures reading or writing a file, including malformed contents.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::File { .. }
                | Error::Parse { .. }
                | Error::EmptyFile
                | Error::UnsupportedFormat(_)
        )
    }

    pub(crate) fn at_path(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
