use thiserror::Error;

/// Error taxonomy shared across the workspace.
///
/// The CLI maps the variants that matter operationally (config, ingest,
/// provenance, divergence) to distinct process exit codes.
#[derive(Debug, Error)]
pub enum ZfsError {
    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("degenerate attribute row: {0}")]
    DegenerateAttribute(String),

    #[error("split overlap: {0}")]
    SplitOverlap(String),

    #[error("part coverage violation: {0}")]
    Coverage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("divergence at batch {batch}: {message}")]
    Divergence { batch: usize, message: String },

    #[error("ZFS violation: {0}")]
    ZfsViolation(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

impl ZfsError {
    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            ZfsError::Config(_) => 2,
            ZfsError::Ingest(_)
            | ZfsError::Schema(_)
            | ZfsError::DegenerateAttribute(_)
            | ZfsError::SplitOverlap(_)
            | ZfsError::Coverage(_) => 3,
            ZfsError::ZfsViolation(_) => 4,
            ZfsError::Divergence { .. } => 5,
            ZfsError::Shape(_) | ZfsError::Contract(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, ZfsError>;

/// Convert io errors at ingestion boundaries, keeping the file path visible.
pub fn io_ingest(path: &std::path::Path, e: std::io::Error) -> ZfsError {
    ZfsError::Ingest(format!("{}: {}", path.display(), e))
}
