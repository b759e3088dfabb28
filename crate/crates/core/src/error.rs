//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the zero threshold {eps:e}")]
    ZeroVector { norm: f64, eps: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("inputs are antipodal within tolerance; the geodesic between them is undefined")]
    AntipodalInputs,

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("duplicate category `{0}`")]
    DuplicateCategory(String),

    #[error("categories `{a}` and `{b}` have indistinguishable prototypes")]
    IndistinctPrototypes { a: String, b: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty gallery")]
    EmptyGallery,

    #[error("empty input")]
    EmptyInput,

    #[error("no mapper available for domain `{0}`")]
    MissingMapper(String),

    #[error("domain `{0}` is not present in the manifest")]
    MissingDomain(String),

    #[error("no model file found for domain `{0}`")]
    MissingModel(String),

    #[error("query has no relevant items in the gallery")]
    NoRelevantItems,

    #[error("ranked list disagrees with gallery labels for item `{0}`")]
    InconsistentLabels(String),

    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("only {available} nonzero principal values available, {needed} needed")]
    RankDeficient { needed: usize, available: usize },

    #[error("fitting {bits} bits requires more than {bits} samples, got {samples}")]
    TooFewSamples { samples: usize, bits: usize },

    #[error("bit width mismatch: {0} vs {1}")]
    WidthMismatch(usize, usize),

    #[error("category `{category}` has {available} support candidates, {needed} needed")]
    InsufficientSupport {
        category: String,
        needed: usize,
        available: usize,
    },

    #[error(
        "could not place {categories} prototypes with pairwise cosine distance \
         >= {min_distance} in {dim} dimensions"
    )]
    InfeasibleSeparation {
        categories: usize,
        dim: usize,
        min_distance: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach file/line context to errors raised while reading a file.
    pub(crate) fn at(self, path: &std::path::Path, line: usize) -> Error {
        match self {
            Error::Parse { .. } | Error::Io(_) => self,
            other => Error::Parse {
                path: path.display().to_string(),
                line,
                msg: other.to_string(),
            },
        }
    }
}
