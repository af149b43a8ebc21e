use thiserror::Error;

/// Errors raised anywhere in the testbed.
///
/// Each variant maps to one category printed by the CLI (`error[<category>]`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("fusion undefined: {0}")]
    Fusion(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Short category tag used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::NonFinite(_) => "numerical",
            Error::Fusion(_) => "fusion",
            Error::Invalid(_) => "input",
            Error::Io { .. } => "io",
            Error::Serde(_) | Error::Csv(_) => "format",
            Error::Context { source, .. } => source.category(),
        }
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "parse" | "format" => 4,
            "numerical" | "fusion" => 5,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
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
}

pub type Result<T> = std::result::Result<T, Error>;
