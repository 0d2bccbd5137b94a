//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("frame {index} has dimension {got}, expected {expected}")]
    RaggedFrames {
        index: usize,
        expected: usize,
        got: usize,
    },

    #[error("stream '{stream_id}' contains no frames")]
    EmptyStream { stream_id: String },

    #[error("stream '{stream_id}' has zero-dimensional frames")]
    EmptyFrames { stream_id: String },

    #[error("span {index} (frames {start}..={end}) overlaps or precedes an earlier span")]
    OverlappingSpans {
        index: usize,
        start: usize,
        end: usize,
    },

    #[error("span {index} (frames {start}..={end}) is out of range for a stream of {len} frames")]
    SpanOutOfRange {
        index: usize,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("invalid step {step}: must satisfy 1 <= step <= window length {window_len}")]
    InvalidStep { step: usize, window_len: usize },

    #[error(
        "target of {labels} labels ({repeats} adjacent repeats) needs at least \
         {needed} frames, window has {window_len}"
    )]
    TargetTooLong {
        labels: usize,
        repeats: usize,
        needed: usize,
        window_len: usize,
    },

    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    #[error("row {row} of a probability matrix sums to {sum}, expected 1")]
    InvalidProbability { row: usize, sum: f64 },

    #[error(
        "brute-force path enumeration limited to {max_len} frames and {max_classes} classes, \
         got {len} frames and {classes} classes"
    )]
    TooLargeForOracle {
        len: usize,
        classes: usize,
        max_len: usize,
        max_classes: usize,
    },

    #[error("backward cache does not match the given parameters or upstream gradient")]
    StaleCache,

    #[error("no stream with ground-truth spans in the training set")]
    NoLabeledData,

    #[error("frame {frame} is covered by no window")]
    CoverageGap { frame: usize },

    #[error("annotation records are not sorted by nucleus (index {index})")]
    Unsorted { index: usize },

    #[error("true label sequence is empty, accuracy is undefined")]
    EmptyTruth,

    #[error("nucleus {nucleus} lies outside the span {start}..={end}")]
    NucleusOutsideSpan {
        nucleus: usize,
        start: usize,
        end: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported checkpoint format version {got}, expected {expected}")]
    CheckpointVersion { got: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
