use std::path::PathBuf;

use thiserror::Error;

use crate::model::Sign;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scenario shape: {0}")]
    ScenarioShape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("matrix: {0}")]
    Matrix(String),

    #[error("rank-zero system: every singular value is below the cutoff")]
    RankZero,

    #[error("step damping exhausted after {halvings} halvings: {reason}")]
    DampingExhausted { halvings: u32, reason: String },

    #[error("degenerate scenario: {0}")]
    DegenerateScenario(String),

    #[error("forward model failed for parameter {parameter} at {sign} step: {source}")]
    Forward {
        parameter: &'static str,
        sign: Sign,
        #[source]
        source: Box<Error>,
    },

    #[error("combinatorial guard: C({n}, {p}) = {count} exceeds {limit}")]
    TooManySubsets {
        n: usize,
        p: usize,
        count: u128,
        limit: u128,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

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

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 for configuration problems, 3 for numeric failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ScenarioShape(_) | Error::Argument(_) | Error::Json(_) => 2,
            Error::Io { .. } | Error::Csv(_) | Error::Format(_) => 4,
            Error::Stage { source, .. } | Error::Forward { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
