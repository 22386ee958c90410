use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("missing column `{column}` in {file}")]
    MissingColumn { file: String, column: String },

    #[error("non-numeric cell `{cell}` in {file}, line {line}, column `{column}`")]
    NonNumeric {
        file: String,
        line: usize,
        column: String,
        cell: String,
    },

    #[error("unknown cause index {cause} for subject `{subject}` (model has {n_causes} causes; 0 = censored)")]
    UnknownCause {
        subject: String,
        cause: i64,
        n_causes: usize,
    },

    #[error("unknown biomarker index {index} for subject `{subject}` (model has {n_biomarkers} biomarkers)")]
    UnknownBiomarker {
        subject: String,
        index: i64,
        n_biomarkers: usize,
    },

    #[error("duplicate survival record for subject `{0}`")]
    DuplicateSurvival(String),

    #[error("no survival record for subject `{0}` appearing in the longitudinal file")]
    NoSurvivalRecord(String),

    #[error("longitudinal time {time} after observed event time {surv_time} for subject `{subject}` (pass drop_post_event to drop such rows)")]
    PostEventObservation {
        subject: String,
        time: f64,
        surv_time: f64,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("singular matrix in {context} (min eigenvalue {min_eig:e})")]
    SingularMatrix { context: String, min_eig: f64 },

    #[error("exponent overflow ({exponent:.1} > 700) in {context}")]
    Overflow { context: String, exponent: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },

    #[error("zero risk-set denominator at event time {time} for cause {cause}")]
    ZeroDenominator { cause: usize, time: f64 },

    #[error("no observations for biomarker {0} in the whole dataset")]
    EmptyBiomarker(usize),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input files or arguments rather than
    /// model/numeric failure. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Csv(_)
                | Error::InvalidSpec(_)
                | Error::MissingColumn { .. }
                | Error::NonNumeric { .. }
                | Error::UnknownCause { .. }
                | Error::UnknownBiomarker { .. }
                | Error::DuplicateSurvival(_)
                | Error::NoSurvivalRecord(_)
                | Error::PostEventObservation { .. }
                | Error::InvalidValue(_)
        )
    }
}
