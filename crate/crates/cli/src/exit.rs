//! Process exit codes and the error type commands return.

use std::fmt;
use std::process::ExitCode;

/// Stable exit-code contract.
///
/// | code | meaning |
/// |------|---------|
/// | 0 | success |
/// | 1 | sweep finished but at least one cell failed |
/// | 2 | configuration or usage error, incompatible checkpoint, refusal to overwrite |
/// | 3 | data error (missing path, unreadable volume, label/class mismatch) |
/// | 4 | numeric divergence during training |
/// | 5 | any other failure |
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    PartialFailure = 1,
    Config = 2,
    Data = 3,
    Divergence = 4,
    Other = 5,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(e as u8)
    }
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub message: String,
}

impl Failure {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        Self {
            exit,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Exit::Config, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn classify(e: &segdg::Error) -> Exit {
    use segdg::Error::*;
    match e {
        Config(_) | ConfigHashMismatch { .. } | Build(_) | WeightShape { .. } | MissingWeight(_) => Exit::Config,
        Data(_) | MissingPath(_) | ClassMismatch(_) | Corrupt { .. } | Io { .. } => Exit::Data,
        NonFinite { .. } => Exit::Divergence,
        Tensor(_) | Shape(_) | Json(_) => Exit::Other,
    }
}

impl From<segdg::Error> for Failure {
    fn from(e: segdg::Error) -> Self {
        Self::new(classify(&e), e.to_string())
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Attach the exit category `exit` to any error.
pub trait OrExit<T> {
    fn or_exit(self, exit: Exit) -> CmdResult<T>;
}

impl<T, E: fmt::Display> OrExit<T> for Result<T, E> {
    fn or_exit(self, exit: Exit) -> CmdResult<T> {
        self.map_err(|e| Failure::new(exit, e.to_string()))
    }
}
