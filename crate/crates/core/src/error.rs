use thiserror::Error;

/// Errors across the crate. Shape problems name both offending shapes;
/// checkpoint problems are split so callers can tell corruption from
/// version skew.
#[derive(Debug, Error)]
pub enum MohError {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint file")]
    Truncated,

    #[error("malformed checkpoint record `{name}`: {detail}")]
    MalformedRecord { name: String, detail: String },

    #[error("config parse error on line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MohError>;
