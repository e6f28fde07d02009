use thiserror::Error;

/// Errors raised by the fusion engine.
#[derive(Debug, Error)]
pub enum FusionError {
    #[error("point ({x}, {y}) lies outside the {grid} grid")]
    OutOfDomain { x: f64, y: f64, grid: String },

    #[error("matrix is not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("value {0} is outside the open interval (0, 1)")]
    DomainError(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("too few records: {0}")]
    TooFewRecords(String),

    #[error("no predictive inputs available at site {site}, day {day}")]
    NoInputs { site: String, day: i64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: u64, msg: String },

    #[error("{path}: missing column `{column}`")]
    Schema { path: String, column: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<FusionError>,
    },
}

impl FusionError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FusionError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        FusionError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, FusionError>;
