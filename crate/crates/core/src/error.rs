use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("degenerate quantizer range: lower {lower} must be below upper {upper}")]
    DegenerateRange { lower: f32, upper: f32 },

    #[error("group {group} has no quantization parameters ({available} groups available)")]
    MissingGroupParams { group: usize, available: usize },

    #[error("no group size given for grouped layer {0}")]
    MissingGroupSize(String),

    #[error("budget of {budget} BOPs is below the cheapest configuration ({required} BOPs)")]
    InfeasibleBudget { required: u64, budget: u64 },

    #[error("quantization site {0} has not been calibrated")]
    UncalibratedSite(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("tensor {name} needs bytes up to {end} but payload holds {len}")]
    TruncatedPayload { name: String, end: u64, len: u64 },

    #[error("duplicate tensor name {0}")]
    DuplicateName(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
