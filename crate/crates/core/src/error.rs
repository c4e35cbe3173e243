use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wavenumber ({psi_h:.4}, {psi_v:.4}) outside codebook coverage")]
    OutOfCoverage { psi_h: f64, psi_v: f64 },

    #[error("no spectral peak above threshold ({ratio:.2} < {threshold:.2})")]
    NoPeak { ratio: f64, threshold: f64 },

    #[error("spatial covariance has no distinct signal subspace")]
    DegenerateCovariance,

    #[error("probabilities do not form a distribution: {0}")]
    InvalidDistribution(String),

    #[error("hierarchical scan found no detecting child at level {level}")]
    ExhaustedTree { level: u32 },

    #[error("crop region is empty")]
    EmptyCrop,

    #[error("need {needed} history records, have {have}")]
    HistoryTooShort { needed: usize, have: usize },

    #[error("no modality has produced a valid record")]
    NoDataAvailable,

    #[error("input is empty")]
    EmptyInput,

    #[error("training diverged at epoch {epoch}")]
    DivergenceDetected { epoch: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Nn(#[from] isac_nn::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::Config(_) => "config",
            CoreError::OutOfCoverage { .. } => "out_of_coverage",
            CoreError::NoPeak { .. } => "no_peak",
            CoreError::DegenerateCovariance => "degenerate_covariance",
            CoreError::InvalidDistribution(_) => "invalid_distribution",
            CoreError::ExhaustedTree { .. } => "exhausted_tree",
            CoreError::EmptyCrop => "empty_crop",
            CoreError::HistoryTooShort { .. } => "history_too_short",
            CoreError::NoDataAvailable => "no_data_available",
            CoreError::EmptyInput => "empty_input",
            CoreError::DivergenceDetected { .. } => "divergence",
            CoreError::Parse(_) => "parse",
            CoreError::Nn(_) => "nn",
            CoreError::Io(_) => "io",
            CoreError::Csv(_) => "csv",
            CoreError::Json(_) => "json",
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
