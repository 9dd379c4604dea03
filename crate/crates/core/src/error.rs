use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("WKT parse error at `{token}`: {reason}")]
    Wkt { token: String, reason: String },

    #[error("record parse error on line {line}: {reason}")]
    Record { line: usize, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("{0}")]
    InvalidTrajectory(String),

    #[error("frame mismatch: expected {expected}, found {found}")]
    FrameMismatch { expected: String, found: String },

    #[error("trajectory needs at least {needed} points, has {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("projection singular: point is antipodal to the projection center")]
    AntipodalPoint,

    #[error("underdetermined alignment: {0}")]
    Underdetermined(String),

    #[error("insufficient overlap: {0}")]
    InsufficientOverlap(String),

    #[error("time-offset objective is flat (rmse spread {spread:.3e} m); lag is unobservable")]
    FlatObjective { spread: f64 },

    #[error("time reversal: cannot predict from {from} back to {to}")]
    TimeReversal { from: f64, to: f64 },

    #[error("covariance lost positive definiteness")]
    NotPositiveDefinite,

    #[error("no candidate track: {0}")]
    NoCandidate(String),

    #[error("misaligned sampling: {0}")]
    MisalignedSampling(String),

    #[error("missing velocity for {0}")]
    MissingVelocity(String),

    #[error("invalid geofence `{fence_id}`: {reason}")]
    Geofence { fence_id: String, reason: String },

    #[error("scene config error: {0}")]
    SceneConfig(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    InFile {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error("file not found: {0}")]
    MissingFile(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Tags an error with the pipeline stage it came from.
    pub fn stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    pub(crate) fn in_file(path: &std::path::Path) -> impl FnOnce(Error) -> Error + '_ {
        move |e| Error::InFile {
            path: path.display().to_string(),
            source: Box::new(e),
        }
    }

    /// Name of the pipeline stage that failed, if tagged.
    pub fn stage_name(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
