use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the process exit codes used by
/// the CLI (see `main.rs`): configuration problems, missing inputs, malformed
/// files, training divergence and degenerate relevance maps each get their
/// own category so callers can react without string matching.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad run configuration: unknown key, unparseable value, or a value that
    /// violates a documented constraint (e.g. fractions that do not sum to 1).
    #[error("config: {0}")]
    Config(String),

    /// A required input file or directory does not exist.
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    /// A file exists but its contents do not match the expected format.
    /// The message names the offending field.
    #[error("format: {0}")]
    Format(String),

    /// Training produced a non-finite loss. Reported with the epoch at which
    /// the first NaN/Inf was observed.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: u32, detail: String },

    /// The combined relevance map is constant, so ranks are undefined.
    #[error("degenerate relevance map: {0}")]
    DegenerateMap(String),

    /// Shape or dimension mismatch between tensors, volumes or masks.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation was used outside its contract (e.g. backward on a
    /// non-scalar node).
    #[error("usage: {0}")]
    Usage(String),

    /// A metric could not be computed (e.g. AUC with a single class present).
    #[error("metric: {0}")]
    Metric(String),

    /// A numeric op produced a NaN or infinity outside of training.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an io::Error with the path it concerns. NotFound is promoted to
    /// `MissingInput` so the CLI can distinguish "file absent" from genuine
    /// I/O failures.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Stable machine-parseable category name, printed by the CLI as
    /// `error[<category>]: ...`.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::MissingInput(_) => "missing-input",
            Error::Format(_) => "format",
            Error::Divergence { .. } => "divergence",
            Error::DegenerateMap(_) => "degenerate-map",
            Error::Dimension(_) => "dimension",
            Error::Usage(_) => "usage",
            Error::Metric(_) => "metric",
            Error::NonFinite(_) => "non-finite",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 2 config, 3 missing input, 4 format, 5 training
    /// divergence, 6 degenerate relevance map, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Metric(_) => 2,
            Error::MissingInput(_) => 3,
            Error::Format(_) | Error::Dimension(_) => 4,
            Error::Divergence { .. } | Error::NonFinite(_) => 5,
            Error::DegenerateMap(_) => 6,
            Error::Io { .. } => 1,
        }
    }
}
