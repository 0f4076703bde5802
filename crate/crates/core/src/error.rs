use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate quantization range [{lo}, {hi}]")]
    DegenerateRange { lo: f32, hi: f32 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f32 },

    #[error("MAC reconciliation failed: {0}")]
    Reconcile(String),
}

pub type Result<T> = std::result::Result<T, Error>;
