use std::fmt;

use aeqa::Error;

/// A command failure, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, bad config values or a stage-order violation (exit 1).
    Usage(String),
    /// Unreadable, malformed or incompatible files (exit 2).
    Data(String),
    /// A self-audit or gradient check that ran and failed (exit 3).
    Verify(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verify(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Verify(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::StageOrder(_) | Error::InvalidInput(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Reclassifies core errors raised while reading input files.
pub fn data<T>(r: aeqa::Result<T>) -> CmdResult<T> {
    r.map_err(|e| Failure::Data(e.to_string()))
}
