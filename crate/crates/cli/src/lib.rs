//! Library side of the `mutualforce` binary, so tests can drive commands directly.

pub mod ablate;
pub mod commands;

use mutualforce_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
/// Anything that is a bug rather than a bad input.
pub const EXIT_INTERNAL: i32 = 1;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Parse { .. } | Error::Io { .. } | Error::CheckpointMismatch(_) => EXIT_DATA,
        Error::NonFinite(_) | Error::Numeric(_) => EXIT_NUMERIC,
        Error::Dimension(_) | Error::Index(_) | Error::Contract(_) => EXIT_INTERNAL,
    }
}

/// `MF_SEED` when set; a malformed value is a config error.
pub fn env_seed() -> mutualforce_core::Result<Option<u64>> {
    match std::env::var("MF_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("MF_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
