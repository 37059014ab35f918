use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic {0:?}, expected \"CLAD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported dump version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("malformed dump: {0}")]
    Malformed(String),
    #[error("tensor `{0}` not found")]
    MissingTensor(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value in `{0}`")]
    NonFiniteValue(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("text bank has no prompts")]
    EmptyBank,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch contains a zero-norm embedding (sample {0})")]
    DegenerateBatch(usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("zero-norm vector in cosine")]
    ZeroNorm,
    #[error("component index {index} out of range for width {width}")]
    IndexOutOfRange { index: usize, width: usize },
    #[error("decomposition does not belong to this model: {0}")]
    NotDecomposed(String),
    #[error("unknown attribution method `{0}`")]
    UnknownMethod(String),
    #[error("component {0} never activates")]
    NoActivations(usize),
    #[error("too few samples: need {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("zero variance in correlation input")]
    ZeroVariance,
    #[error("class {0} has no samples")]
    EmptyClass(u32),
    #[error("empty set: {0}")]
    EmptySet(&'static str),
    #[error("missing text bank variant `{0}`")]
    MissingBankVariant(String),
    #[error("probe training data contains a single class")]
    SingleClass,
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRangeInput(f64),
    #[error("sweep has no delta = 0 baseline")]
    MissingBaseline,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
