use thiserror::Error;

/// Errors produced by model construction, exact solvers, and the simulator.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A model parameter failed validation.
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// A state, action, or index argument was out of range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// An action vector violates the one-user-per-channel constraints.
    #[error("inadmissible assignment: {0}")]
    Inadmissible(String),

    /// Enumerating the joint action space would exceed the configured limit.
    #[error("action space too large: {count} assignments exceed the limit of {limit}")]
    ActionSpaceTooLarge { count: u128, limit: u128 },

    /// The joint state space is too large for dense exact methods.
    ///
    /// Dense solvers store an (|S|+1)^2 linear system and a kernel of size
    /// O(|S|^2 * |A|); four users with ten states each already exhaust
    /// desk-scale memory. Use the online simulator for larger instances.
    #[error(
        "state space too large for exact solving: {states} joint states exceed the limit of \
         {limit} (dense policy evaluation needs O(states^2) memory)"
    )]
    StateSpaceTooLarge { states: u128, limit: u128 },

    /// The induced Markov chain has more than one recurrent class, so the
    /// average cost is not a single scalar and the Poisson system is
    /// inconsistent.
    #[error("policy induces a multichain Markov chain ({recurrent_classes} recurrent classes); average cost is not well defined")]
    Multichain { recurrent_classes: usize },

    /// A linear solve failed or left a residual above tolerance.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The activation-frequency gap between neighboring thresholds vanished,
    /// so no virtual cost can equalize them.
    #[error("degenerate activation gap at threshold {theta}: neighboring threshold policies transmit at identical frequency")]
    DegenerateGap { theta: u32 },

    /// A policy tag was not recognized.
    #[error("unknown policy tag: {0:?}")]
    UnknownPolicy(String),

    /// A learning-rate schedule violates the convergence conditions.
    #[error("invalid step schedule: {0}")]
    InvalidSchedule(String),

    /// A serialized table or record failed to parse.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
