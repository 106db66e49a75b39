use thiserror::Error;

/// Errors reported by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty support after normalization")]
    EmptySupport,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no closed-form TI constant; use ti_probe")]
    NoClosedFormTi,

    #[error("outside smooth domain")]
    OutsideSmoothDomain,

    #[error("vector is not tangent at the base point (inner product {0:e})")]
    NotTangent(f64),

    #[error("finite-difference stencil leaves the working box")]
    StencilOutsideBox,

    #[error("states do not come from consecutive iterations of one run")]
    MismatchedRuns,

    #[error("{pairs} atom pairs exceed the exact solver limit of {limit}; subsample the measures")]
    TooLarge { pairs: usize, limit: usize },

    #[error("matrix is singular or not positive definite")]
    Singular,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("unknown setting `{0}`")]
    UnknownSetting(String),

    #[error("exact solver did not terminate within {0} pivots")]
    PivotLimit(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
