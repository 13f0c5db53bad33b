use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("layer {0} is not in the store")]
    LayerNotFound(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Core(#[from] ilc_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for configuration errors, 3 for missing
    /// artifacts, 4 for numerical failures and 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use ilc_core::Error as C;
        match self {
            Error::Config { .. } | Error::Core(C::InvalidParam(_) | C::InvalidSpec(_)) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Core(C::Divergence { .. } | C::Numerical(_) | C::DegenerateReference | C::DegenerateMeans(..)) => 4,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Checksum { .. } => "checksum",
            Error::LayerNotFound(_) => "layer_not_found",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Config { .. } => "config",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Core(_) if self.exit_code() == 4 => "numerical",
            Error::Core(_) => "core",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Machine-readable form written to stderr by the command line.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        match self {
            Error::Config { path, .. } => v["path"] = path.clone().into(),
            Error::MissingArtifact(p) | Error::Io { path: p, .. } => v["file"] = p.display().to_string().into(),
            _ => {}
        }
        v
    }
}
