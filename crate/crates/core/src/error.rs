use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Each variant maps onto one process exit code (see [`Error::exit_code`]),
/// so the command-line front end can report failures by class.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("empty sequence: mask selects no positions")]
    EmptySequence,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("record rejected: {0}")]
    RecordRejected(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate scaler: training targets are constant or too few")]
    DegenerateScaler,

    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("no records retained after filtering")]
    NoRecordsRetained,

    #[error("missing embedding for sequence id `{0}`")]
    MissingEmbedding(String),

    #[error("embeddings missing for {} sequence id(s): {}", .0.len(), .0.join(", "))]
    MissingEmbeddings(Vec<String>),

    #[error("format error: {0}")]
    Format(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}, max |param| {max_abs_param}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        max_abs_param: f64,
    },

    #[error("gradient check failed for {0} parameter group(s)")]
    GradCheckFailed(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class. `0` is success and `2` is
    /// reserved for argument parsing failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Csv(_) => 3,
            Error::Format(_) | Error::Json(_) => 4,
            Error::NoRecordsRetained => 5,
            Error::SplitInfeasible(_) => 6,
            Error::Config(_) | Error::ConfigMismatch(_) => 7,
            Error::MissingEmbedding(_) | Error::MissingEmbeddings(_) => 8,
            Error::Diverged { .. } | Error::NonFinite(_) => 9,
            Error::GradCheckFailed(_) => 10,
            Error::RecordRejected(_) | Error::Domain(_) => 11,
            Error::DegenerateScaler | Error::UndefinedMetric(_) => 12,
            Error::Dimension { .. } | Error::Contract(_) | Error::EmptySequence => 70,
        }
    }
}
