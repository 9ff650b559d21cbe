use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Core(#[from] bitdiff_core::Error),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Config { key: key.into(), msg: msg.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config { .. } => "config",
            Self::Usage(_) => "usage",
            Self::Archive(_) => "archive",
            Self::Core(bitdiff_core::Error::InvalidArgument(_)) => "usage",
            Self::Core(_) => "core",
            Self::Io { .. } => "io",
            Self::Json(_) => "json",
        }
    }

    /// 2 for bad invocations, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "usage" | "config" => 2,
            _ => 1,
        }
    }

    /// Single-line JSON error record.
    pub fn record(&self) -> String {
        let mut v = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        if let Self::Config { key, .. } = self {
            v["error"]["key"] = json!(key);
        }
        v.to_string()
    }
}
