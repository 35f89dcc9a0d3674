use thiserror::Error;

/// A single row-level problem found while validating input records.
#[derive(Debug, Clone, PartialEq)]
pub struct RowViolation {
    /// Zero-based row index, `None` for dataset-level problems.
    pub row: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for RowViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.row {
            Some(r) => write!(f, "row {r}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {}", format_violations(.0))]
    Validation(Vec<RowViolation>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("separation detected{}: {reason}", arm_suffix(*.arm))]
    Separation { arm: Option<usize>, reason: String },

    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:.3e}){}", arm_suffix(*.arm))]
    Convergence {
        arm: Option<usize>,
        iterations: usize,
        gradient_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("design is rank deficient; collinear columns {columns:?}")]
    Rank { columns: Vec<usize> },

    #[error("no events available to fit the censoring model for arm {arm}")]
    NoEvents { arm: usize },

    #[error("observed-censoring mode requires every censoring time to be recorded")]
    Mode,

    #[error("Kaplan-Meier estimate is not identified at horizon {horizon}")]
    UndefinedAtHorizon { horizon: f64 },

    #[error("arm {arm} has no complete cases")]
    EmptyCell { arm: usize },

    #[error("censoring survival reaches zero before the observation time of subjects {subjects:?}")]
    Positivity { subjects: Vec<usize> },

    #[error("singular {block} block in the influence-function expansion")]
    SingularBlock { block: String },

    #[error("bootstrap degenerate: {failed} of {total} replicates failed")]
    BootstrapDegenerate {
        failed: usize,
        total: usize,
        failures: Vec<String>,
    },

    #[error("Monte Carlo degenerate: {failed} of {total} replicates failed for {method}")]
    MonteCarloDegenerate {
        method: String,
        failed: usize,
        total: usize,
    },

    #[error("trimming removed every subject of arm {arm}")]
    TrimDegenerate { arm: usize },

    #[error("invalid configuration at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach an arm id to errors that carry one.
    pub fn with_arm(self, arm: usize) -> Self {
        match self {
            Error::Separation { reason, .. } => Error::Separation {
                arm: Some(arm),
                reason,
            },
            Error::Convergence {
                iterations,
                gradient_norm,
                last_iterate,
                ..
            } => Error::Convergence {
                arm: Some(arm),
                iterations,
                gradient_norm,
                last_iterate,
            },
            Error::NoEvents { .. } => Error::NoEvents { arm },
            other => other,
        }
    }

    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

fn format_violations(v: &[RowViolation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

fn arm_suffix(arm: Option<usize>) -> String {
    arm.map(|a| format!(" in arm {a}")).unwrap_or_default()
}

pub type Result<T> = std::result::Result<T, Error>;
