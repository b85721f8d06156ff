use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rejected model: {0}")]
    RejectedSpec(String),

    #[error("insufficient range: {0}")]
    InsufficientRange(String),

    #[error("divergent series at u={u}, s={s}: {reason}")]
    DivergentSeries { u: f64, s: f64, reason: String },

    #[error("infinite moment {what} at u=0, s=0: needs {condition}")]
    InfiniteMoment { what: String, condition: String },

    #[error("unsupported derivative order (s: {order_s}, u: {order_u})")]
    UnsupportedOrder { order_s: usize, order_u: usize },

    #[error("root bracket failure: {0}")]
    BracketFailure(String),

    #[error("out of domain: {0}")]
    OutOfDomain(String),

    #[error("wrong regime: {0}")]
    WrongRegime(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("newton stall: {0}")]
    NewtonStall(String),

    #[error("no convergence after {iterations} iterations (last increment {increment:e})")]
    NoConvergence { iterations: usize, increment: f64 },

    #[error("invalid roof: {0}")]
    InvalidRoof(String),

    #[error("Perron positivity violated: {0}")]
    NotPositive(String),
}

pub type Result<T> = std::result::Result<T, Error>;
