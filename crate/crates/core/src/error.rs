use thiserror::Error;

/// Errors produced by the simulation, optimization and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{quantity} = {value} is outside its valid range")]
    Domain { quantity: &'static str, value: f64 },

    #[error("flow {flow} veh/h exceeds the maximum flow {q_max} veh/h")]
    InfeasibleFlow { flow: f64, q_max: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vehicle entering at t = {entry_h} h has not exited when the run ends at {end_h} h")]
    HorizonTruncated { entry_h: f64, end_h: f64 },

    #[error("average travel time is undefined: no vehicles were admitted")]
    NoAdmittedFlow,

    #[error("peak flow {q_p} veh/h exceeds the queue-dissipation limit {limit} veh/h")]
    QueuePersists { q_p: f64, limit: f64 },

    #[error("target travel time {target_min} min is below the free-flow time {free_flow_min} min")]
    InfeasibleTarget { target_min: f64, free_flow_min: f64 },

    #[error("root is not bracketed on [{lo}, {hi}]")]
    NotBracketed { lo: f64, hi: f64 },

    #[error("input series must be nondecreasing (index {index})")]
    NotMonotone { index: usize },

    #[error("empty input")]
    Empty,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(quantity: &'static str, value: f64) -> Error {
    Error::Domain { quantity, value }
}
