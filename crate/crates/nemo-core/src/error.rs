use thiserror::Error;

#[derive(Debug, Error)]
pub enum NemoError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("timestep {t} out of range for schedule of length {len}")]
    Timestep { t: usize, len: usize },
    #[error("need at least {need} holdout prompts, got {got}")]
    TooFewPrompts { need: usize, got: usize },
    #[error("memorization score needs two non-empty sets of noise differences")]
    EmptySet,
    #[error("activation stats missing neuron ({layer}, {index})")]
    MissingStats { layer: usize, index: usize },
    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("oracle budget exceeded: universe {universe} with max cardinality {max_card}")]
    Budget { universe: usize, max_card: usize },
    #[error("training did not converge: final loss {loss} above ceiling {ceiling}")]
    NonConvergence { loss: f64, ceiling: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NemoError>;
