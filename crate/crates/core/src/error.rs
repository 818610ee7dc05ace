use thiserror::Error;

/// Crate-wide error type. Variants are grouped roughly by the subsystem that
/// raises them; all carry enough context to act on without a backtrace.
#[derive(Debug, Error)]
pub enum Error {
    // ---- tensor / tape ----
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {got:?}")]
    InvalidShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("slice {start}+{len} exceeds extent {extent} on axis {axis}")]
    SliceOutOfRange {
        axis: usize,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),

    // ---- text / vocabulary ----
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("cannot encode an empty token sequence")]
    EmptyTokenSequence,
    #[error("vocabulary error: {0}")]
    InvalidVocabulary(String),
    #[error("missing description for interaction {id} ({action} {object})")]
    MissingDescription {
        id: usize,
        action: String,
        object: String,
    },
    #[error("unknown body part {part:?} in description for ({action} {object})")]
    UnknownBodyPart {
        part: String,
        action: String,
        object: String,
    },
    #[error("empty description for ({action} {object})")]
    EmptyDescription { action: String, object: String },
    #[error("no description available for ({action} {object})")]
    DescriptionNotFound { action: String, object: String },

    // ---- decoder / levels ----
    #[error("level {level} outside 1..={available}")]
    LevelOutOfRange { level: usize, available: usize },
    #[error("levels must be non-empty and strictly increasing, got {0:?}")]
    BadLevelSet(Vec<usize>),
    #[error("level position {pos} outside 0..{num_levels}")]
    LevelPosOutOfRange { pos: usize, num_levels: usize },

    // ---- matching ----
    #[error("cost matrix has {rows} rows < {cols} cols")]
    RowsLessThanCols { rows: usize, cols: usize },
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("{cols} columns exceed the exhaustive-search bound of {max}")]
    EnumerationTooLarge { cols: usize, max: usize },
    #[error("empty ground truth; matching is skipped upstream for background-only images")]
    EmptyGroundTruth,
    #[error("assignment pair ({row}, {col}) outside a {rows}x{cols} problem")]
    StaleAssignment {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("interaction id {0} out of range for {1} classes")]
    InteractionOutOfRange(usize, usize),

    // ---- data / serialization ----
    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedRecord {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: truncated container at byte {offset}")]
    TruncatedContainer { path: String, offset: u64 },
    #[error("{path}: bad container header: {msg}")]
    BadContainer { path: String, msg: String },
    #[error("image buffer: expected {expected} values, got {got}")]
    ImageDims { expected: usize, got: usize },
    #[error("generator spec error: {0}")]
    InvalidGeneratorSpec(String),
    #[error("config error: {0}")]
    InvalidConfig(String),
    #[error("checkpoint parameter {name}: expected shape {expected:?}, found {found:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint missing entry {0}")]
    CheckpointMissing(String),

    // ---- training ----
    #[error("training aborted: non-finite loss at step {step}; inputs dumped to {dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap a serde_json error with the file it came from.
    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
