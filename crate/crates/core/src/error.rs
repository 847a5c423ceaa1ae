use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input is empty")]
    EmptyInput,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("timestamps must be finite and strictly increasing (index {0})")]
    NonMonotonicTime(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("point ({x:.2}, {y:.2}) lies outside the {width}x{height} frame")]
    OutOfFrame { x: f64, y: f64, width: usize, height: usize },
    #[error("no ROI available for this frame")]
    NoRoi,
    #[error("landmark track contains no valid frame")]
    EmptyTrack,
    #[error("patch of {width}x{height} is smaller than the {min}-pixel expansion neighbourhood")]
    PatchTooSmall { width: usize, height: usize, min: usize },
    #[error("time step must be positive, got {0}")]
    InvalidTimestep(f64),
    #[error("extracted signal has no samples")]
    EmptySignal,
    #[error("need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("window is constant; spectrum undefined")]
    DegenerateWindow,
    #[error("no valid RR estimate for this window")]
    NoEstimate,
    #[error("training data contains a single class")]
    SingleClassFold,
    #[error("model has not been trained")]
    NotTrained,
    #[error("leave-one-subject-out needs at least two subjects, got {0}")]
    CannotSplit(usize),
    #[error("no paired estimates to compare")]
    NoPairs,
    #[error("insufficient replication: {0}")]
    InsufficientData(String),
    #[error("statistic undefined: {0}")]
    Undefined(String),
    #[error("dataset format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("unsupported model format version {0}")]
    ModelVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }
}
