use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cell index out of range: level {level}, i {i}, j {j}")]
    IndexOutOfRange { level: i64, i: i64, j: i64 },

    #[error("cannot refine level {level}: finest level is {max_level}")]
    BeyondFinest { level: u8, max_level: u8 },

    #[error("root cell has no parent")]
    NoParent,

    #[error("cells {0} and {1} are not edge-adjacent")]
    NotAdjacent(String, String),

    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: String, reason: String },

    #[error("instability on level {level} at t = {time}: {reason}")]
    Instability { level: u8, time: f64, reason: String },

    #[error("elliptic solve did not converge after {iterations} iterations (relative residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("at t = {time}: {source}")]
    Simulation {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("harness error: {0}")]
    Harness(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(field: &str, reason: impl Into<String>) -> Self {
        Error::Parameter { field: field.to_string(), reason: reason.into() }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}

impl Error {
    /// Attaches the simulation time unless the error already carries one.
    pub fn at_time(self, time: f64) -> Self {
        match self {
            e @ (Error::Instability { .. } | Error::Simulation { .. }) => e,
            e => Error::Simulation { time, source: Box::new(e) },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
