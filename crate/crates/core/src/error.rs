use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("transition row (state {state}, action {action}) sums to {sum}")]
    UnnormalizedRow { state: usize, action: usize, sum: f64 },
    #[error("transition (state {state}, action {action}) -> {next} has invalid probability {prob}")]
    InvalidProbability {
        state: usize,
        action: usize,
        next: usize,
        prob: f64,
    },
    #[error("cost of state {state} is not finite ({value})")]
    NonFiniteCost { state: usize, value: f64 },
    #[error("rationality coefficient must be finite and non-negative, got {0}")]
    InvalidBeta(f64),
    #[error("step, episode and horizon counts must be positive")]
    ZeroSteps,
    #[error("initial state distribution is empty")]
    EmptyInitialDistribution,
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value during backup step {step}")]
    NonFiniteStep { step: usize },
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing header field `{0}`")]
    MissingField(&'static str),
    #[error("task `{task}` goal ({x}, {y}) is outside the {width}x{height} grid")]
    GoalOutOfBounds {
        task: String,
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("task `{0}` has no goal cells")]
    EmptyTask(String),
    #[error("environment defines no tasks")]
    NoTasks,
    #[error("grid has {found} rows of width {width}, expected {expected} rows")]
    GridShape {
        expected: usize,
        found: usize,
        width: usize,
    },
    #[error("color {0} is used in the grid but has no direction")]
    UnknownColor(u8),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported dataset version `{0}`")]
    Version(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("objective became non-finite after {iterations} iterations")]
    Diverged { iterations: usize },
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is for algorithm `{found}`, expected `{expected}`")]
    Algorithm { expected: String, found: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
