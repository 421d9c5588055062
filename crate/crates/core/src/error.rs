use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input: bad dimensions, out-of-range parameters, co-located
    /// nodes.
    #[error("domain error: {0}")]
    Domain(String),

    /// A queue is not stable (`μ ≤ λ` or `r ≤ λ`), so its delay is infinite.
    #[error("unstable queue: service rate {service} does not exceed arrival rate {arrival}")]
    UnstableQueue { service: f64, arrival: f64 },

    /// No point satisfies the delay QoS of the listed users.
    #[error("infeasible instance: delay QoS cannot be met for users {users:?}")]
    Infeasible { users: Vec<usize> },

    /// The convex subproblem solver failed to make progress.
    #[error("solver failure: {0}")]
    Solver(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
