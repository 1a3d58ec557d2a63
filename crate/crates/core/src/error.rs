//! Error type shared by every layer of the emulator, and the numeric
//! return-code space that crosses the world boundary.

use std::io;

use thiserror::Error;

/// Numeric return codes carried across the client/TA boundary.
///
/// The first five values are the stable contract used by tests and the C
/// ABI. The remainder follow the usual GlobalPlatform numbering.
pub mod rc {
    pub const SUCCESS: u32 = 0x0000_0000;
    pub const GENERIC: u32 = 0xFFFF_0000;
    pub const ACCESS_DENIED: u32 = 0xFFFF_0001;
    pub const ACCESS_CONFLICT: u32 = 0xFFFF_0003;
    pub const BAD_PARAMETERS: u32 = 0xFFFF_0006;
    pub const BAD_STATE: u32 = 0xFFFF_0007;
    pub const ITEM_NOT_FOUND: u32 = 0xFFFF_0008;
    pub const OUT_OF_MEMORY: u32 = 0xFFFF_000C;
    pub const COMMUNICATION: u32 = 0xFFFF_000E;
    pub const SECURITY: u32 = 0xFFFF_000F;
    pub const SHORT_BUFFER: u32 = 0xFFFF_0010;
    pub const TARGET_DEAD: u32 = 0xFFFF_3024;
    pub const STORAGE_NO_SPACE: u32 = 0xFFFF_3041;
    pub const CORRUPT_OBJECT: u32 = 0xF010_0001;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown TEE device {0:?}")]
    UnknownDevice(String),
    #[error("handle {0} is not live")]
    StaleHandle(u64),
    #[error("trusted application {0} not found")]
    TaNotFound(uuid::Uuid),
    #[error("trusted application {0} panicked: {1}")]
    TaPanicked(uuid::Uuid, String),
    #[error("session target is dead")]
    TargetDead,
    #[error("bad parameters: {0}")]
    BadParameters(String),
    #[error("out of memory")]
    OutOfMemory,
    #[error("item not found")]
    ItemNotFound,
    #[error("short buffer: {required} bytes required")]
    ShortBuffer { required: usize },
    #[error("uuid {0} already registered")]
    DuplicateUuid(uuid::Uuid),
    #[error("access denied: {0}")]
    AccessDenied(&'static str),
    #[error("object already exists")]
    AccessConflict,
    #[error("object failed authentication")]
    CorruptObject,
    #[error("storage quota exceeded")]
    QuotaExceeded,
    #[error("path {0:?} escapes the store root")]
    PathViolation(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Return code reported for this error when it crosses the boundary.
    pub fn code(&self) -> u32 {
        match self {
            Error::UnknownDevice(_) | Error::TaNotFound(_) | Error::ItemNotFound => rc::ITEM_NOT_FOUND,
            Error::StaleHandle(_) => rc::BAD_STATE,
            Error::TaPanicked(..) | Error::TargetDead => rc::TARGET_DEAD,
            Error::BadParameters(_) | Error::Config(_) => rc::BAD_PARAMETERS,
            Error::OutOfMemory => rc::OUT_OF_MEMORY,
            Error::ShortBuffer { .. } => rc::SHORT_BUFFER,
            Error::DuplicateUuid(_) => rc::ACCESS_CONFLICT,
            Error::AccessDenied(_) | Error::PathViolation(_) => rc::ACCESS_DENIED,
            Error::AccessConflict => rc::ACCESS_CONFLICT,
            Error::CorruptObject => rc::CORRUPT_OBJECT,
            Error::QuotaExceeded => rc::STORAGE_NO_SPACE,
            Error::Manifest { .. } => rc::GENERIC,
            Error::Io(_) | Error::Csv(_) => rc::COMMUNICATION,
        }
    }

    pub(crate) fn bad_params(msg: impl Into<String>) -> Self {
        Error::BadParameters(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normative_codes() {
        assert_eq!(Error::bad_params("x").code(), 0xFFFF_0006);
        assert_eq!(Error::ItemNotFound.code(), 0xFFFF_0008);
        assert_eq!(Error::OutOfMemory.code(), 0xFFFF_000C);
        assert_eq!(Error::TargetDead.code(), 0xFFFF_3024);
    }
}
