use thiserror::Error;

use crate::model::ModuleKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed adapter config: {0}")]
    MalformedConfig(String),

    #[error("missing config field `{0}`")]
    MissingField(&'static str),

    #[error("unknown target module name `{0}`")]
    UnknownModuleName(String),

    #[error("invalid naming schema: {0}")]
    InvalidSchema(String),

    #[error("corrupt tensor file header: {0}")]
    CorruptHeader(String),

    #[error("unsupported tensor dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing tensor for layer {layer} module {kind}{detail}")]
    MissingTensor {
        layer: usize,
        kind: ModuleKind,
        detail: String,
    },

    #[error("orphan tensor `{0}` (module not declared in config or name not recognised)")]
    OrphanTensor(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cannot merge an empty list of pairs")]
    EmptyInput,

    #[error("merge weight {0} is not finite")]
    NonFiniteWeight(f32),

    #[error("merge weight {0} is negative")]
    NegativeWeight(f32),

    #[error("merge weights are all zero")]
    AllZeroWeights,

    #[error("recipe `{recipe}` expects {expected} weights, got {got}")]
    WeightCount {
        recipe: String,
        expected: usize,
        got: usize,
    },

    #[error("recipe `{recipe}` expects {expected} source adapters, got {got}")]
    SourceCount {
        recipe: String,
        expected: usize,
        got: usize,
    },

    #[error("recipe `{recipe}` precondition violated: {detail}")]
    SignatureMismatch { recipe: String, detail: String },

    #[error("layer count mismatch: {0} vs {1}")]
    LayerCountMismatch(usize, usize),

    #[error("base model mismatch: `{0}` vs `{1}`")]
    BaseModelMismatch(String, String),

    #[error("unknown recipe `{0}` (expected same, ff-only, 2way, 3way, fusion or safety)")]
    UnknownRecipe(String),

    #[error("invalid signature `{0}`")]
    InvalidSignature(String),

    #[error("duplicate adapter id `{0}` in manifest")]
    DuplicateAdapterId(String),

    #[error("malformed manifest record at line {line}: {detail}")]
    MalformedManifest { line: usize, detail: String },

    #[error("malformed fixture: {0}")]
    MalformedFixture(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors raised because a merge recipe's structural
    /// precondition does not hold for the given adapters.
    pub fn is_recipe_precondition(&self) -> bool {
        matches!(
            self,
            Error::SignatureMismatch { .. }
                | Error::SourceCount { .. }
                | Error::WeightCount { .. }
                | Error::LayerCountMismatch(..)
                | Error::BaseModelMismatch(..)
        )
    }

    /// Stable variant name for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedConfig(_) => "MalformedConfig",
            Error::MissingField(_) => "MissingField",
            Error::UnknownModuleName(_) => "UnknownModuleName",
            Error::InvalidSchema(_) => "InvalidSchema",
            Error::CorruptHeader(_) => "CorruptHeader",
            Error::UnsupportedDtype(_) => "UnsupportedDtype",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::MissingTensor { .. } => "MissingTensor",
            Error::OrphanTensor(_) => "OrphanTensor",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::EmptyInput => "EmptyInput",
            Error::NonFiniteWeight(_) => "NonFiniteWeight",
            Error::NegativeWeight(_) => "NegativeWeight",
            Error::AllZeroWeights => "AllZeroWeights",
            Error::WeightCount { .. } => "WeightCount",
            Error::SourceCount { .. } => "SourceCount",
            Error::SignatureMismatch { .. } => "SignatureMismatch",
            Error::LayerCountMismatch(..) => "LayerCountMismatch",
            Error::BaseModelMismatch(..) => "BaseModelMismatch",
            Error::UnknownRecipe(_) => "UnknownRecipe",
            Error::InvalidSignature(_) => "InvalidSignature",
            Error::DuplicateAdapterId(_) => "DuplicateAdapterId",
            Error::MalformedManifest { .. } => "MalformedManifest",
            Error::MalformedFixture(_) => "MalformedFixture",
            Error::Io { .. } => "Io",
        }
    }
}
