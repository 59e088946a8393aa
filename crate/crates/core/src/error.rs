use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("non-binary spike value {value} at flat index {index}")]
    NonBinary { index: usize, value: f64 },

    #[error("tdBN running statistics are not initialized")]
    UninitializedStats,

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("split point {split} out of range 1..={max}")]
    SplitOutOfRange { split: usize, max: usize },

    #[error("bottleneck cannot map {axis} {from} -> {to}: {reason}")]
    Bottleneck {
        axis: &'static str,
        from: usize,
        to: usize,
        reason: String,
    },

    #[error("unknown hardware profile `{0}`")]
    UnknownProfile(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
