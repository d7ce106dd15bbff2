use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which knowledge-base invariant was violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationKind {
    DuplicateId,
    DanglingRef,
    TypExcOverlap,
    EmptyTypical,
    BadId,
}

/// First violated knowledge-base constraint, with the offending ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub kind: ValidationKind,
    pub ids: Vec<String>,
}

impl ValidationError {
    pub fn new(kind: ValidationKind, ids: &[&str]) -> Self {
        Self {
            kind,
            ids: ids.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ValidationKind::DuplicateId => "duplicate id",
            ValidationKind::DanglingRef => "reference to unknown phenotype",
            ValidationKind::TypExcOverlap => "phenotype both typical and excluded",
            ValidationKind::EmptyTypical => "disease has no typical phenotypes",
            ValidationKind::BadId => "id must match [a-z0-9_]+",
        };
        write!(f, "{what}: {}", self.ids.join(", "))
    }
}

impl std::error::Error for ValidationError {}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid knowledge base: {0}")]
    Validation(#[from] ValidationError),
    #[error("unknown disease '{0}'")]
    UnknownDisease(String),
    #[error("caption requires at least one disease label")]
    EmptyLabels,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("completion was empty")]
    EmptyCompletion,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token list is empty")]
    EmptyTokens,
    #[error("token sequence is empty")]
    EmptySeq,
    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("temperature must be positive and finite, got {0}")]
    BadTau(f64),
    #[error("no candidate embeddings")]
    EmptyCandidates,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("differences have zero variance")]
    ZeroVariance,
    #[error("could not sample an example with at least one disease after {0} attempts")]
    DegenerateWorld(usize),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Stable snake_case name of the innermost variant.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Validation(_) => "validation",
            Error::UnknownDisease(_) => "unknown_disease",
            Error::EmptyLabels => "empty_labels",
            Error::Config(_) => "config",
            Error::Transport { .. } => "transport",
            Error::Protocol(_) => "protocol",
            Error::EmptyCompletion => "empty_completion",
            Error::EmptyCorpus => "empty_corpus",
            Error::EmptyTokens => "empty_tokens",
            Error::EmptySeq => "empty_seq",
            Error::ZeroNorm => "zero_norm",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::BadTau(_) => "bad_tau",
            Error::EmptyCandidates => "empty_candidates",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::ZeroVariance => "zero_variance",
            Error::DegenerateWorld(_) => "degenerate_world",
            Error::Context { .. } => unreachable!("root skips context"),
        }
    }

    /// Innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
