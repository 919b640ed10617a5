use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // tokenizer
    #[error("value must be strictly positive, got {0}")]
    NonPositiveValue(f64),
    #[error("token {token} is a {actual} token, expected {expected}")]
    WrongCategory { token: String, expected: &'static str, actual: &'static str },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("sequence does not begin with START")]
    MissingStart,
    #[error("sequence ends before END")]
    MissingEnd,
    #[error("component token at position {0} is not followed by a value token")]
    DanglingComponent(usize),
    #[error("malformed topology/spec prefix at position {0}")]
    SpecRegionMalformed(usize),
    #[error("unexpected token at position {0}")]
    UnexpectedToken(usize),

    // topology library
    #[error("unknown topology `{0}`")]
    UnknownTopology(String),
    #[error("topology `{0}` has a disconnected component graph")]
    DisconnectedTopology(String),
    #[error("template error: {0}")]
    Template(String),

    // grammar
    #[error("grammar state is DONE; no further tokens may be emitted")]
    DoneState,
    #[error("token {token} is not allowed in the current grammar state")]
    IllegalToken { token: String },
    #[error("every token is masked")]
    AllMasked,

    // model
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("sequence is invalid for the requested constraint level: {0}")]
    InvalidSequence(String),
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),

    // simulation
    #[error("design does not match template `{0}`")]
    ComponentMismatch(String),
    #[error("simulator unavailable: {0}")]
    SimulatorUnavailable(String),
    #[error("could not parse simulator output: {0}")]
    ParseFailure(String),

    // rl / evaluation
    #[error("advantage group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("evaluation requested with zero samples")]
    EmptyEvaluation,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonPositiveValue(_) => "NonPositiveValue",
            Error::WrongCategory { .. } => "WrongCategory",
            Error::UnknownToken(_) => "UnknownToken",
            Error::MissingStart => "MissingStart",
            Error::MissingEnd => "MissingEnd",
            Error::DanglingComponent(_) => "DanglingComponent",
            Error::SpecRegionMalformed(_) => "SpecRegionMalformed",
            Error::UnexpectedToken(_) => "UnexpectedToken",
            Error::UnknownTopology(_) => "UnknownTopology",
            Error::DisconnectedTopology(_) => "DisconnectedTopology",
            Error::Template(_) => "Template",
            Error::DoneState => "DoneState",
            Error::IllegalToken { .. } => "IllegalToken",
            Error::AllMasked => "AllMasked",
            Error::BadConfig(_) => "BadConfig",
            Error::EmptyBatch => "EmptyBatch",
            Error::InvalidSequence(_) => "InvalidSequence",
            Error::CheckpointMismatch(_) => "CheckpointMismatch",
            Error::ComponentMismatch(_) => "ComponentMismatch",
            Error::SimulatorUnavailable(_) => "SimulatorUnavailable",
            Error::ParseFailure(_) => "ParseFailure",
            Error::GroupTooSmall(_) => "GroupTooSmall",
            Error::EmptyEvaluation => "EmptyEvaluation",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
