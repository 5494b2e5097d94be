use thiserror::Error;

/// Errors produced by the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("insufficient keypoints: need at least {required}, got {actual}")]
    TooFewPoints { required: usize, actual: usize },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unsupported format version {found} (this build reads major version {supported})")]
    UnsupportedVersion { found: String, supported: u32 },

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
