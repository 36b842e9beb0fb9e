use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vehicle {id}: energy need {need} exceeds deliverable energy {capacity}")]
    EmptyFeasibleSet { id: String, need: f64, capacity: f64 },

    #[error("vehicle {id}: slot {slot} outside horizon of {horizon} slots")]
    IndexOutOfRange { id: String, slot: usize, horizon: usize },

    #[error("vehicle {id}: {message}")]
    InvalidRequest { id: String, message: String },

    #[error("battery capacity must be positive, got {0}")]
    NonPositiveCapacity(f64),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite gradient entry at slot {slot}")]
    NonFiniteGradient { slot: usize },

    #[error("budget {budget} not within [0, {capacity}]")]
    InfeasibleBudget { budget: f64, capacity: f64 },

    #[error("aggregation tree is not connected to the center: node {node}")]
    DisconnectedTree { node: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular KKT system at bus {bus}")]
    SingularKkt { bus: usize },

    #[error("invalid cost model: {0}")]
    InvalidCost(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error at {location}: {message}")]
    Validation { location: String, message: String },

    #[error("{solver} did not converge within {iterations} iterations")]
    NotConverged { solver: &'static str, iterations: usize },

    #[error("unknown instance kind `{0}`")]
    UnknownKind(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            location: location.into(),
            message: message.into(),
        }
    }
}
