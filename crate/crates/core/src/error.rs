use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("samples are constant (q10 == q90); drop this dimension")]
    ConstantDimension,
    #[error("invalid knots: {0}")]
    InvalidKnots(String),
    #[error("penalty needs num_basis > order >= 1 (num_basis={num_basis}, order={order})")]
    InvalidPenalty { num_basis: usize, order: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("map derivative is not positive at sample {sample} (value {value:e})")]
    BarrierViolation { sample: usize, value: f64 },
    #[error("linear system is not positive definite ({0}); increase lambda or ridge")]
    Singular(String),
    #[error("monotone term is flat; cannot invert")]
    NotInvertible,
    #[error("root bracketing failed for target {0}")]
    Bracket(f64),
    #[error("model too complex for ensemble size: n={n}, edf={edf:.3}")]
    TooComplex { n: usize, edf: f64 },
    #[error("invalid parent set: {0}")]
    ParentSet(String),
    #[error("invalid ensemble: {0}")]
    Ensemble(String),
    #[error("component {component}: {source}")]
    Component {
        component: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("inversion failed for member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("integration produced a non-finite state")]
    Diverged,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}
