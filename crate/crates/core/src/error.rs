use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::scenario::Violation;

/// Errors raised by the simulation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
    #[error("sample rate {sample_rate} Hz too low for content at {frequency} Hz")]
    Nyquist { sample_rate: f64, frequency: f64 },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("scenario validation failed: {}", ViolationList(.0))]
    Validation(Vec<Violation>),
    #[error("{0}")]
    NotFound(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("CRC mismatch: expected {expected:#04x}, computed {computed:#04x}")]
    Crc { expected: u8, computed: u8 },
    #[error("{phase} timed out after {elapsed_s} s")]
    Timeout { phase: &'static str, elapsed_s: f64 },
    #[error("downlink decode failed after {attempts} attempts")]
    DecodeFailure { attempts: u32 },
    #[error("{phase}: v_load fell to {v_load} V")]
    Brownout { phase: &'static str, v_load: f64 },
    #[error("data matrix aborted at node `{node}` after {completed} records: {source}")]
    MatrixAborted { node: String, completed: usize, source: Box<Error> },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument { name, reason: reason.into() }
}

struct ViolationList<'a>(&'a [Violation]);

impl fmt::Display for ViolationList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}
