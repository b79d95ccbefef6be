use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid box: w={w}, h={h} (both must be > 0)")]
    InvalidBox { w: f64, h: f64 },

    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("grid index ({i},{j}) outside {cells}x{cells} grid")]
    OutOfGrid { i: i64, j: i64, cells: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("sequence too short: {got} frames, need at least {need}")]
    TooShortSequence { need: usize, got: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("checkpoint version mismatch: found {found:?}, expected {expected:?}")]
    CheckpointVersion { found: String, expected: String },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: String, msg: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for this error: 2 for I/O-ish failures,
    /// 3 for numeric failures, 1 otherwise (usage/config).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Io { .. }
            | Error::Image { .. }
            | Error::Parse { .. }
            | Error::CheckpointVersion { .. }
            | Error::CheckpointCorrupt(_)
            | Error::TooShortSequence { .. }
            | Error::EmptySequence => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
