use std::path::PathBuf;

/// Errors raised anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("stale forward trace: parameters or mask changed since the traced forward pass")]
    StaleTrace,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer collapse: layer {layer} ({name}) would lose every prunable weight")]
    LayerCollapse { layer: usize, name: String },

    #[error("dirichlet partition failed after {retries} retries: {reason}")]
    PartitionRetries { retries: usize, reason: String },

    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    #[error("config: {0}")]
    Config(String),

    #[error("incompatible file {path}: {reason}")]
    Incompatible { path: PathBuf, reason: String },

    #[error("truncated file {path} at byte offset {offset} (expected {expected} bytes)")]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected: u64,
    },

    #[error("corrupt file {path} at byte offset {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("all selected devices dropped out in round {round}")]
    AllDevicesFailed { round: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// Short machine-readable category, used by the CLI's error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::StaleTrace => "stale_trace",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::LayerCollapse { .. } => "layer_collapse",
            Error::PartitionRetries { .. } => "partition",
            Error::SizeGuard(_) => "size_guard",
            Error::Config(_) => "config",
            Error::Incompatible { .. } => "incompatible",
            Error::Truncated { .. } => "truncated",
            Error::Corrupt { .. } => "corrupt",
            Error::AllDevicesFailed { .. } => "all_devices_failed",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }

    /// Whether the error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Config(_) | Error::Incompatible { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
