use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LacoatError>;

#[derive(Debug, Error)]
pub enum LacoatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch in layer {layer}: expected {expected} bytes, found {found}")]
    ShapeMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in layer {layer}, record {record}")]
    NonFinite { layer: usize, record: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("unknown concept id {0}")]
    UnknownConcept(usize),

    #[error("classes without training examples: {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("llm transport error (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },

    #[error("could not parse llm response: {0}")]
    ResponseParse(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LacoatError>,
    },
}

impl LacoatError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LacoatError::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LacoatError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        LacoatError::Json {
            context: context.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            LacoatError::Stage { source, .. } => source.is_validation(),
            LacoatError::Json { .. }
            | LacoatError::Invalid(_)
            | LacoatError::MissingFile(_)
            | LacoatError::ShapeMismatch { .. }
            | LacoatError::NonFinite { .. }
            | LacoatError::DimMismatch { .. }
            | LacoatError::UnknownConcept(_)
            | LacoatError::MissingClasses(_) => true,
            LacoatError::Io { .. }
            | LacoatError::Transport { .. }
            | LacoatError::ResponseParse(_) => false,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| LacoatError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
