//! Error types shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter is outside its admissible range.
    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },

    /// Array shapes do not agree.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A mask shift would push the pattern outside the active sensing area.
    #[error(
        "shift {shift} places a {mask_rows}x{mask_cols} mask outside the \
         {active_rows}x{active_cols} active area"
    )]
    ShiftOutOfBounds {
        shift: f64,
        mask_rows: usize,
        mask_cols: usize,
        active_rows: usize,
        active_cols: usize,
    },

    /// Materializing the measurement matrix would exceed the small-instance cap.
    #[error("explicit matrix would hold {entries} entries, above the cap of {cap}")]
    ExplicitMatrixCap { entries: u64, cap: u64 },

    /// File does not start with the CCV1 magic bytes.
    #[error("bad magic at byte 0: expected \"CCV1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    /// Header dimensions overflow or exceed the supported volume size.
    #[error("header dimensions {rows}x{cols}x{frames} at byte 4 overflow the supported size")]
    DimOverflow { rows: u32, cols: u32, frames: u32 },

    /// Payload length disagrees with the header.
    #[error("payload at byte {offset}: expected {expected} bytes, found {found}")]
    PayloadSize {
        offset: usize,
        expected: u64,
        found: u64,
    },

    /// A stored value decodes to NaN or infinity.
    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: usize },

    /// Run-configuration text is malformed or incomplete.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    pub(crate) fn dims(
        context: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
