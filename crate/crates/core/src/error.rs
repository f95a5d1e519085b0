use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("power split must lie in (0, 1), got {0}")]
    PowerSplit(f64),

    #[error("coincident elements at distance {0} m")]
    CoincidentElements(f64),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error(
        "selected UE {0} is on the reflection side; the large-timescale UE must be refraction-side"
    )]
    ReflectionSideSelected(usize),

    #[error("training overhead {t_tot} exceeds the large-timescale length {upsilon}")]
    OverheadExceedsFrame { t_tot: usize, upsilon: usize },

    #[error("zero reference channel")]
    ZeroChannel,

    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
