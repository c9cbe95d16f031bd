use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rotation: orthogonality error {orthogonality:.3e}, det {det}")]
    NotRotation { orthogonality: f64, det: f64 },

    #[error("matrix is not skew-symmetric: ||S + S^T||_F = {asymmetry:.3e}")]
    NotSkew { asymmetry: f64 },

    #[error("axis-angle vector has norm {norm} > pi")]
    OffBranch { norm: f64 },

    #[error("cannot project onto SO(3): {reason}")]
    Degenerate { reason: String },

    #[error("{what} is not symmetric positive-definite")]
    NotPositiveDefinite { what: &'static str },

    #[error("implicit step is not solvable: lambda_min(J^2 + M^2/4) = {margin:.6e}")]
    NotSolvable { margin: f64 },

    #[error("rollout step {step} is not solvable: lambda_min(J^2 + M^2/4) = {margin:.6e}")]
    NotSolvableAt { step: usize, margin: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("pair (A, B) is not stabilizable")]
    NotStabilizable,

    #[error("inner matrix B^T P B + R is singular")]
    SingularInnerMatrix,

    #[error("rollout failed at step {step}: {reason}")]
    RolloutFailure { step: usize, reason: String },

    #[error("state is outside the logarithmic chart")]
    OutOfChart,

    #[error("no terminal level passes certification (smallest level tried {smallest:.3e})")]
    NoFeasibleC { smallest: f64 },

    #[error("optimal control problem infeasible: constraint violation {violation:.3e}")]
    Infeasible { violation: f64 },

    #[error("closed loop infeasible at step {step}: constraint violation {violation:.3e}")]
    InfeasibleAt { step: usize, violation: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
