//! Error taxonomy shared across the workspace.
//!
//! Four classes matter to callers: shape mismatches, contract violations
//! (bad arguments, misuse of an API), numeric failures (non-finite values),
//! and I/O or parse failures. The CLI maps the first three to exit code 1
//! and the last two to exit code 2.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible operand shapes; names both shapes, `(rows, cols)`.
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// An API precondition was violated.
    Contract(String),
    /// A computation produced or consumed a non-finite value.
    Numeric(String),
    /// Filesystem or encoding failure.
    Io(String),
    /// Malformed input file; `line` is 1-based, 0 when the file as a whole is at fault.
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(context: &str, err: std::io::Error) -> Self {
        Error::Io(format!("{context}: {err}"))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::Parse { line, msg } => {
                if *line == 0 {
                    write!(f, "parse error: {msg}")
                } else {
                    write!(f, "parse error at line {line}: {msg}")
                }
            }
        }
    }
}

impl std::error::Error for Error {}
