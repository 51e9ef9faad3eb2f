use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum DbmError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("enumeration needs {needed} states but the budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("missing neighbor layer {0:?}")]
    MissingNeighbor(crate::model::LayerId),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<DbmError>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DbmError>;

impl DbmError {
    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ DbmError::Stage { .. } => e,
            e => DbmError::Stage { stage: stage.into(), source: Box::new(e) },
        }
    }

    /// The stage name, if the error came from a pipeline stage.
    pub fn stage(&self) -> Option<&str> {
        match self {
            DbmError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
