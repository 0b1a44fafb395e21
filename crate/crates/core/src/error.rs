use thiserror::Error;

pub type Result<T, E = GefError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GefError {
    #[error("primitive {index} is at depth {depth} which is not in front of the near plane")]
    BehindCamera { index: usize, depth: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("scene has {have} primitives but at least {need} are required")]
    SceneTooSmall { have: usize, need: usize },

    #[error("empty ray: total opacity mass {mass:e} is below 1e-12")]
    EmptyRay { mass: f64 },

    #[error("empty neighborhood around primitive {index}: all opacities vanish")]
    EmptyNeighborhood { index: usize },

    #[error("no dominant primitives above opacity threshold {threshold}")]
    NoDominantPrimitives { threshold: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite {term} at iteration {iteration}{}", primitive.map(|i| format!(" (primitive {i})")).unwrap_or_default())]
    NonFinite {
        term: &'static str,
        iteration: usize,
        primitive: Option<usize>,
    },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GefError {
    /// Whether the error comes from reading, writing or parsing files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            GefError::Io(_) | GefError::File { .. } | GefError::Parse { .. } | GefError::UnsupportedFormat(_)
        )
    }

    pub fn file(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        GefError::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        GefError::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        GefError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
