//! Exit codes and one-line error tags.
//!
//! | code | tag              | meaning                                   |
//! |------|------------------|-------------------------------------------|
//! | 0    |                  | success                                   |
//! | 2    | `usage`          | bad command line                          |
//! | 3    | `invalid-config` | run/train configuration rejected          |
//! | 4    | `layout`         | layout file malformed or invalid          |
//! | 5    | `io`             | read/write failure or malformed artifact  |
//! | 6    | `not-found`      | missing input file or run artifact        |
//! | 7    | `runtime`        | numeric failure, divergence, replay drift |
//! | 8    | `weights`        | weights file unreadable or mismatched     |

use std::fmt;

use layoutfuse_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    InvalidConfig,
    Layout,
    Io,
    NotFound,
    Runtime,
    Weights,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::InvalidConfig => 3,
            Kind::Layout => 4,
            Kind::Io => 5,
            Kind::NotFound => 6,
            Kind::Runtime => 7,
            Kind::Weights => 8,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::InvalidConfig => "invalid-config",
            Kind::Layout => "layout",
            Kind::Io => "io",
            Kind::NotFound => "not-found",
            Kind::Runtime => "runtime",
            Kind::Weights => "weights",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Keep the diagnostic on one line.
        write!(f, "error[{}]: {}", self.kind.tag(), self.message.replace('\n', " "))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::InvalidConfig(_) => Kind::InvalidConfig,
            Error::Format { .. } | Error::Vocabulary { .. } => Kind::Layout,
            Error::Io(_) | Error::Json(_) => Kind::Io,
            Error::NotFound(_) => Kind::NotFound,
            Error::Weights(_) => Kind::Weights,
            Error::NumericDomain(_)
            | Error::DegenerateVector(_)
            | Error::Argument(_)
            | Error::SamplerDivergence { .. }
            | Error::Training { .. } => Kind::Runtime,
        };
        CliError::new(kind, e.to_string())
    }
}

/// Reclassifies format errors as artifact (io) errors, for commands that
/// read run directories rather than layout files.
pub fn artifact(e: Error) -> CliError {
    match e {
        Error::Format { .. } => CliError::new(Kind::Io, e.to_string()),
        other => other.into(),
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
