use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    /// A check ran to completion and failed.
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Runtime(_) => 2,
            Self::Verification(_) => 3,
        }
    }
}

impl From<lxfuse::Error> for CliError {
    fn from(e: lxfuse::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<lxfuse_annotate::AnnotateError> for CliError {
    fn from(e: lxfuse_annotate::AnnotateError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}
