use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("layers {first} and {second} are shape-incompatible: {detail}")]
    LayerShape {
        first: usize,
        second: usize,
        detail: String,
    },
    #[error("layer {index} is invalid: {detail}")]
    InvalidLayer { index: usize, detail: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient in layer {layer} ({role})")]
    NonFiniteGradient { layer: usize, role: &'static str },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config {field}: {detail}")]
    Config { field: String, detail: String },
    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("truncated file {}: expected {expected} bytes, found {found}", path.display())]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("artifact version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("expected a {expected} artifact, found {found}")]
    Kind { expected: String, found: String },
    #[error("cannot place {classes} centers {separation} apart in {dims} dimensions")]
    InfeasibleSeparation {
        classes: usize,
        dims: usize,
        separation: f64,
    },
    #[error("direction is not filter-normalized")]
    UnnormalizedDirection,
    #[error("every grid cell is non-finite")]
    AllSentinel,
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable tag for this error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::LayerShape { .. } => "layer_shape",
            Error::InvalidLayer { .. } => "invalid_layer",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::Truncated { .. } => "truncated",
            Error::Corrupt(_) => "corrupt",
            Error::Version { .. } => "version",
            Error::Kind { .. } => "kind",
            Error::InfeasibleSeparation { .. } => "infeasible_separation",
            Error::UnnormalizedDirection => "unnormalized_direction",
            Error::AllSentinel => "all_sentinel",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
