use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the crate.
#[derive(Debug)]
pub enum Error {
    /// IDX file does not start with the expected magic number.
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    /// Image and label headers disagree on the instance count.
    CountMismatch { images: usize, labels: usize },
    /// File payload is shorter than its header implies.
    Truncated { path: PathBuf, expected: usize, found: usize },
    /// A split fraction rounds down to zero items.
    EmptySplit { name: &'static str },
    /// Split fractions are not positive or sum to more than one.
    BadSplitSpec(String),
    /// Unknown classifier architecture identifier.
    UnknownArch(String),
    /// A loss became non-finite during training or optimization.
    Diverged { context: &'static str },
    /// Tensor shapes disagree with what an operation requires.
    ShapeMismatch(String),
    /// Checkpoint manifest disagrees with the model being loaded.
    ManifestMismatch(String),
    /// Checkpoint tensor file is missing or its size disagrees with the manifest.
    CorruptTensor(String),
    /// Ensemble defense configured without donor models.
    MissingStaticModels,
    /// Oracle query budget would be exceeded.
    BudgetExhausted { used: u64, budget: u64 },
    /// Pipeline configuration failed validation.
    SchemaError(String),
    /// A pipeline stage needs an artifact that a prior stage has not produced.
    MissingArtifact { stage: String, artifact: String },
    /// Report assembly found an experiment cell with no result.
    MissingCell(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::BadMagic { path, expected, found } => write!(
                f,
                "{}: bad magic number {found:#010x}, expected {expected:#010x}",
                path.display()
            ),
            Error::CountMismatch { images, labels } => {
                write!(f, "image count {images} does not match label count {labels}")
            }
            Error::Truncated { path, expected, found } => write!(
                f,
                "{}: payload has {found} bytes, header implies {expected}",
                path.display()
            ),
            Error::EmptySplit { name } => {
                write!(f, "split '{name}' rounds to zero items")
            }
            Error::BadSplitSpec(msg) => write!(f, "invalid split spec: {msg}"),
            Error::UnknownArch(s) => write!(f, "unknown architecture '{s}'"),
            Error::Diverged { context } => write!(f, "{context}: loss became non-finite"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::ManifestMismatch(msg) => write!(f, "manifest mismatch: {msg}"),
            Error::CorruptTensor(msg) => write!(f, "corrupt tensor: {msg}"),
            Error::MissingStaticModels => {
                write!(f, "ensemble defense requires at least one static donor model")
            }
            Error::BudgetExhausted { used, budget } => {
                write!(f, "query budget exhausted: {used} used of {budget}")
            }
            Error::SchemaError(msg) => write!(f, "config error: {msg}"),
            Error::MissingArtifact { stage, artifact } => {
                write!(f, "stage '{stage}' requires missing artifact '{artifact}'")
            }
            Error::MissingCell(name) => write!(f, "experiment cell '{name}' has no result"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
