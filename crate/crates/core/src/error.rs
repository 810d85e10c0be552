use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate items (all-correct or all-incorrect weighted responses): {0:?}")]
    DegenerateItems(Vec<String>),

    #[error("domain '{domain}' is empty after filter stage '{stage}'")]
    EmptyDomain { domain: String, stage: String },

    #[error("stratum {stratum} has only {available} open-ended items, need {needed}")]
    InsufficientStratum {
        stratum: usize,
        available: usize,
        needed: usize,
    },

    #[error("correlation undefined: input vector is constant")]
    ConstantVector,

    #[error("comparison graph is disconnected; components: {0:?}")]
    DisconnectedGraph(Vec<Vec<usize>>),

    #[error(
        "perfect separation in win matrix (items {0:?} are never beaten or never win); \
         refit with smoothing > 0"
    )]
    PerfectSeparation(Vec<usize>),

    #[error("missing anchor item for few-shot prompt: {0}")]
    MissingAnchor(String),

    #[error("authentication failed for backend '{backend}': {detail}")]
    Auth { backend: String, detail: String },

    #[error("malformed backend response: {0}")]
    MalformedResponse(String),

    #[error("retries exhausted after {attempts} attempts: {last_error}")]
    RetryExhausted { attempts: u32, last_error: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("cache corruption at key {key}: {detail}")]
    CacheCorrupt { key: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage precondition failed: {0}")]
    StagePrecondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
