use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("return {value} lies outside the open support (-{g_max}, {g_max})")]
    OutOfSupport { value: f64, g_max: f64 },

    #[error("flow inversion failed to bracket return {target}")]
    Convergence { target: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),

    #[error("cannot step terminal state {0}")]
    TerminalState(usize),

    #[error("rollout exceeded {0} steps without terminating")]
    RolloutOverflow(usize),

    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
