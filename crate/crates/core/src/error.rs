use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the model, routing, execution and data layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("top-k: k = {k} exceeds candidate count {len}")]
    TopKTooLarge { k: usize, len: usize },

    #[error("invalid routing budget: {0}")]
    InvalidBudget(String),

    #[error("stage-II candidate shortage: {candidates} experts outside the shared set, {adaptive} required")]
    CandidateShortage { candidates: usize, adaptive: usize },

    #[error("expert index {expert} out of range for {experts} experts")]
    UnknownExpert { expert: usize, experts: usize },

    #[error("execution plan has {plan_rows} rows but packed input has {input_rows}")]
    PlanMismatch { plan_rows: usize, input_rows: usize },

    #[error("no packed row for instance {instance}, expert {expert}")]
    MissingBackMap { instance: usize, expert: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("prediction {value} at instance {instance}, task {task} is outside [0, 1]")]
    PredictionOutOfRange {
        instance: usize,
        task: usize,
        value: f64,
    },

    #[error("AUC undefined: {positives} positives, {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },

    #[error("GAUC undefined: none of {users} users has both classes")]
    NoQualifyingUsers { users: usize },

    #[error("training diverged at epoch {epoch}, step {step}: {snapshot}")]
    Diverged {
        epoch: usize,
        step: usize,
        snapshot: String,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Workspace(#[from] crate::workspace::WorkspaceError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configuration or data
    /// validation) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::InvalidBudget(_)
                | Error::CandidateShortage { .. }
                | Error::Parse { .. }
                | Error::Invalid(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
