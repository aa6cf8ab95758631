use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty attention row {row}: every source token is masked out")]
    EmptyAttentionRow { row: usize },

    #[error("unmatched label {label}: present in the target map but absent from the source map")]
    UnmatchedLabel { label: u32 },

    #[error("mismatched layer sets: {0}")]
    LayerMismatch(String),

    #[error("timestep {t} outside [0, {t_max}]")]
    Timestep { t: usize, t_max: usize },

    #[error("resolution {height}x{width} is not divisible by {factor}")]
    Resolution {
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("attention taps were not registered on this backbone")]
    UnregisteredTaps,

    #[error("backbone has no conditioning hook; a structural condition cannot be applied")]
    ConditionUnsupported,

    #[error("non-finite value during {stage} at index {index}")]
    NonFinite { stage: &'static str, index: usize },

    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("tiling would need {windows} windows (limit {limit}); try stride {suggested_stride}")]
    TooManyWindows {
        windows: usize,
        limit: usize,
        suggested_stride: usize,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}
