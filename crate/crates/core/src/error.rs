use std::collections::BTreeMap;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the planner can report. Each variant belongs to one
/// [`ErrorClass`], which the CLI maps onto a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },

    #[error("dangling buffer reference `{buffer}` in operator `{operator}`")]
    DanglingBuffer { operator: String, buffer: String },

    #[error("no latency entry for micro-op kind {0}")]
    UnknownKind(String),

    #[error("unsupported operator `{operator}`: {reason}")]
    Unsupported { operator: String, reason: String },

    #[error("dependency graph contains a cycle through node {0}")]
    Cycle(u32),

    #[error("insufficient pages: interval {interval} of op {op} found no free page among {pages}")]
    InsufficientPages {
        op: u32,
        interval: usize,
        pages: u32,
    },

    #[error("cannot simulate an empty trace")]
    EmptyTrace,

    #[error("simulation deadlock: blocked ops {blocked:?}")]
    Deadlock { blocked: Vec<u32> },

    #[error("no feasible candidate ({})", fmt_histogram(.pruned))]
    NoFeasibleCandidate { pruned: BTreeMap<String, u64> },

    #[error("trace format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("hash mismatch on {field}: expected {expected}, found {found}")]
    HashMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_histogram(h: &BTreeMap<String, u64>) -> String {
    if h.is_empty() {
        return "nothing enumerated".to_string();
    }
    h.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    MissingInput,
    Parse,
    Validation,
    NoFeasibleCandidate,
    InternalDeadlock,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Io => 1,
            ErrorClass::MissingInput => 2,
            ErrorClass::Parse => 3,
            ErrorClass::Validation => 4,
            ErrorClass::NoFeasibleCandidate => 5,
            ErrorClass::InternalDeadlock => 6,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingInput(_) => ErrorClass::MissingInput,
            Error::Parse { .. } | Error::Version { .. } | Error::HashMismatch { .. } => {
                ErrorClass::Parse
            }
            Error::Invalid { .. }
            | Error::DanglingBuffer { .. }
            | Error::UnknownKind(_)
            | Error::Unsupported { .. }
            | Error::Cycle(_)
            | Error::InsufficientPages { .. }
            | Error::EmptyTrace => ErrorClass::Validation,
            Error::NoFeasibleCandidate { .. } => ErrorClass::NoFeasibleCandidate,
            Error::Deadlock { .. } => ErrorClass::InternalDeadlock,
            Error::Io { .. } => ErrorClass::Io,
        }
    }

    pub(crate) fn invalid(what: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            message: message.into(),
        }
    }

    pub(crate) fn parse(context: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Parse {
            context: context.into(),
            message: err.to_string(),
        }
    }
}

/// Reads a whole file, mapping "not found" to [`Error::MissingInput`].
pub(crate) fn read_file(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.display().to_string())
        } else {
            Error::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })
}
