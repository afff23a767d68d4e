use thiserror::Error;

/// Errors shared by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("computation graph contains a cycle")]
    CycleDetected,

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("invalid parallel config: {0}")]
    InvalidConfig(String),

    #[error("message of {bytes} bytes exceeds the profiled range (max 2^{max_log2})")]
    ProfileOutOfRange { bytes: u64, max_log2: u32 },

    #[error("no partitioning scheme for groups of {group_size} on {device_count} devices")]
    SchemeMissing { group_size: u64, device_count: u64 },

    #[error("no collective sequence connects the two tensor layouts")]
    Unreachable,

    #[error("missing cost for {0}")]
    MissingCost(String),

    #[error("strategies overlap on operator {op}")]
    OverlappingStrategies { op: u64 },

    #[error("elimination precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("composite config space of {size} exceeds the cap of {cap}")]
    SpaceExplosion { size: usize, cap: usize },

    #[error("graph cannot be reduced to a linear backbone")]
    NotLinearizable,

    #[error("graph is not linear")]
    NotLinear,

    #[error("strategy reconstruction failed: {0}")]
    BrokenProvenance(String),

    #[error("{strategies} strategies exceed the brute-force limit of {limit}")]
    TooLarge { strategies: u128, limit: u128 },

    #[error("no candidate device count satisfies the memory budget")]
    NoFeasibleCount,

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
