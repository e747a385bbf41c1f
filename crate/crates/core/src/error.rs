use std::io;

pub type Result<T, E = VilError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum VilError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error at step {step}: {msg}")]
    Numeric { step: usize, msg: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<VilError>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl VilError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        VilError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        VilError::Config(msg.into())
    }

    /// Wraps the error with a stage or location label.
    pub fn context(self, context: impl Into<String>) -> Self {
        VilError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, with all context layers stripped.
    pub fn root(&self) -> &VilError {
        match self {
            VilError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
