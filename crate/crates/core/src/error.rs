use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid cluster count: k = {k} with {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("unknown cluster id {0}")]
    UnknownCluster(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("beta-divergence undefined for beta = {beta} at x = {x}, y = {y}")]
    DivergenceDomain { beta: f64, x: f64, y: f64 },
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("singular design matrix: regressor {dimension} is linearly dependent")]
    SingularDesign { dimension: usize },
    #[error("no target >= 1, MAPE@1 undefined")]
    NoNonZeroTargets,
    #[error("misaligned windows: {0}")]
    Misaligned(String),
    #[error("weather gap at {0}")]
    WeatherGap(String),
    #[error("stage `{stage}` failed")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("missing evaluations: {0:?}")]
    MissingEvaluations(Vec<String>),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
