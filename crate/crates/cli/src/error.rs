use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] clickprobe::Error),
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing file: {}", .0.display())]
    Missing(PathBuf),
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Io { path: path.to_path_buf(), source }
        }
    }

    /// 2 for configuration and usage problems, 3 for missing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Core(clickprobe::Error::Config(_)) => 2,
            CliError::Missing(_) | CliError::Core(clickprobe::Error::MissingFile(_)) => 3,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        use clickprobe::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) | CliError::Core(E::Config(_)) => "config",
            CliError::Missing(_) | CliError::Core(E::MissingFile(_)) => "missing_file",
            CliError::Io { .. } | CliError::Core(E::Io { .. }) => "io",
            CliError::Serve(_) => "serve",
            CliError::Core(E::Ingestion(_)) => "ingestion",
            CliError::Core(E::Dataset(_)) => "dataset",
            CliError::Core(E::Format(_)) => "format",
            CliError::Core(E::Image { .. }) => "image",
            CliError::Core(E::NoErrorRegion) => "no_error_region",
            CliError::Core(_) => "runtime",
        }
    }

    /// The single line printed to stderr on failure.
    pub fn json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}
