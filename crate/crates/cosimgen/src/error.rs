use std::path::Path;

/// Failure of a command, rendered as a single JSON line on stderr.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Core(#[from] cosimgen_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        use cosimgen_core::Error as E;
        match self {
            Self::Usage(_) => "usage",
            Self::Io { .. } => "io",
            Self::Format(_) => "format",
            Self::Core(e) => match e {
                E::Config(_) => "config",
                E::NonFinite { .. } => "non_finite",
                E::Shape(_) => "shape",
                _ => "validation",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn format_err(msg: impl std::fmt::Display) -> CliError {
    CliError::Format(msg.to_string())
}
