use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("tap mismatch: {0}")]
    TapMismatch(String),

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("head cannot shrink from {current} to {requested} classes")]
    HeadShrink { current: usize, requested: usize },

    #[error("model head has {head} outputs but {needed} classes are required")]
    HeadTooSmall { head: usize, needed: usize },

    #[error("expert set is empty")]
    NoExperts,

    #[error("sample pool is empty")]
    EmptyPool,

    #[error("unknown {what}: {value}")]
    Unknown { what: &'static str, value: String },

    #[error("decode error at byte {offset}: {detail}")]
    Decode { offset: usize, detail: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("expert {expert} failed: {reason}")]
    ExpertFailed { expert: u32, reason: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("zero total cost")]
    ZeroCost,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}
