use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GmnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GmnError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token sequence contract violated: {0}")]
    TokenOrder(String),

    #[error("pagerank did not converge after {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("dense eigensolver capacity exceeded: n = {n} > {cap}; use rwse for large graphs")]
    Capacity { n: usize, cap: usize },

    #[error("non-finite gradient produced by op `{op}` (tape node {node})")]
    NonFiniteGradient { op: &'static str, node: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("label/task mismatch: {0}")]
    Labels(String),
}

impl GmnError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GmnError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Errors caused by bad numbers rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GmnError::NotConverged { .. }
                | GmnError::NonFiniteGradient { .. }
                | GmnError::Diverged { .. }
        )
    }
}
