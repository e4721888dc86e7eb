use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    Dimension {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("overlap undefined: both masks are empty")]
    UndefinedOverlap,

    #[error("pose estimation region is empty")]
    EmptyRegion,

    #[error("no pixel of the region warps to a valid location at the initial pose")]
    AllInvalid,

    #[error("warped object mask does not overlap its target mask")]
    NoOverlap,

    #[error("empty support for metric evaluation")]
    EmptySupport,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("malformed raster: {0}")]
    MalformedRaster(String),

    #[error("malformed mask: {0}")]
    MalformedMask(String),

    #[error("malformed text input: {0}")]
    MalformedText(String),

    #[error("scene error: {0}")]
    Scene(String),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at(self, path: &std::path::Path) -> Error {
        Error::File {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through file context.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension { expected, actual });
    }
    Ok(())
}
