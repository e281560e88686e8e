use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants map onto two process exit codes: validation problems (bad
/// inputs, malformed files, violated preconditions) exit with 2, anything
/// that went wrong while computing exits with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("unknown label {0:?}")]
    Label(String),
    #[error("cannot stratify: {0}")]
    Stratify(String),
    #[error("class weights: {0}")]
    Weight(String),
    #[error("phantom generation failed: {0}")]
    Generation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("weight transfer: {0}")]
    Transfer(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite values: {0}")]
    Numeric(String),
    #[error("invalid task state: {0}")]
    State(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("task/batch mismatch: {0}")]
    Task(String),
    #[error("learning-rate search failed: {0}")]
    Search(String),
    #[error("missing key {0:?}")]
    Key(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("no mask component survived filtering")]
    EmptyMask,
    #[error("attention map sums to zero")]
    ZeroAttention,
    #[error("masks unavailable: {0}")]
    Mask(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context layers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::Format(_)
                | Error::Label(_)
                | Error::Stratify(_)
                | Error::Weight(_)
                | Error::Shape(_)
                | Error::CorruptCheckpoint(_)
                | Error::Config(_)
                | Error::Task(_)
                | Error::Key(_)
                | Error::Empty(_)
                | Error::Mask(_)
                | Error::DegenerateData(_)
        )
    }

    /// Stable process exit code: 2 for validation errors, 3 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            2
        } else {
            3
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
