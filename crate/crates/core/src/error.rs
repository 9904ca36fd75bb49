use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}{}: {message}", column.as_ref().map(|c| format!(", column '{c}'")).unwrap_or_default())]
    Parse {
        line: usize,
        column: Option<String>,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible constraint set: {0}")]
    Infeasible(String),

    #[error("solver did not converge after {iterations} iterations ({message}); primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e}")]
    Convergence {
        message: String,
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
    },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("cross-validation failed for every grid value: {}", format_failures(.failures))]
    CrossValidation { failures: Vec<(f64, String)> },

    #[error("unsupported model file version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("corrupt model: invariant '{invariant}' violated ({detail})")]
    CorruptModel { invariant: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_failures(failures: &[(f64, String)]) -> String {
    failures
        .iter()
        .map(|(lambda, reason)| format!("lambda={lambda:e}: {reason}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
