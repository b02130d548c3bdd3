use std::fmt;
use std::path::Path;

use fairgrpo::Error;

pub const OK: u8 = 0;
pub const OTHER: u8 = 1;
pub const IO: u8 = 2;
pub const DATA: u8 = 3;
pub const MISSING: u8 = 4;
pub const INCOMPATIBLE: u8 = 5;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => IO,
            Error::Data { .. } | Error::Dataset(_) | Error::Config(_) | Error::Json(_) | Error::Checkpoint(_) => DATA,
            Error::Incompatible(_) => INCOMPATIBLE,
            Error::Shape { .. } | Error::Contract(_) | Error::NonFinite(_) | Error::Diverged { .. } => OTHER,
        };
        Failure::new(code, e.to_string())
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

/// Fails with [`MISSING`] unless `path` exists; `producer` names the
/// subcommand that writes it.
pub fn require(path: &Path, producer: &str) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::new(
            MISSING,
            format!("missing artifact {}; run `fairgrpo {producer}` first", path.display()),
        ))
    }
}
