use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("gradient requested of a non-scalar output (shape {shape:?})")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("node {node} is not connected to the differentiated output")]
    Disconnected { node: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class index {index} out of range for {classes} classes")]
    InvalidClass { index: usize, classes: usize },

    #[error("rank-deficient matrix in {0}")]
    RankDeficient(&'static str),

    #[error("all class-conditional densities vanish at the query point")]
    VanishingDensity,

    #[error("operation not supported by this world: {0}")]
    Unsupported(&'static str),

    #[error("undefined alignment: zero gradient")]
    UndefinedAlignment,

    #[error("undefined cosine: zero vector")]
    UndefinedCosine,

    #[error(
        "ill-conditioned ratio: denominator {mean:e} is within 10 standard errors ({se:e}) of zero"
    )]
    IllConditionedRatio { mean: f64, se: f64 },

    #[error("degenerate model: zero sensitivity to signal and distractor noise")]
    DegenerateModel,

    #[error("bad magic number {found:#010x}")]
    BadMagic { found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("empty sweep")]
    EmptySweep,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
