use std::process::ExitCode;

use pqe_core::evalkit::EvalError;
use pqe_core::synthbench::SynthError;
use pqe_core::{ClusterError, EmbedError, FormatError, GradError, IndexError, ScoreError};

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Io,
    Format,
    Validation,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Io => 3,
            Kind::Format => 4,
            Kind::Validation => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Io => "io",
            Kind::Format => "format",
            Kind::Validation => "validation",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
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

    pub fn io(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        Self::new(Kind::Io, format!("{context}: {err}"))
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(Kind::Validation, message)
    }

    pub fn format(message: impl Into<String>) -> Self {
        Self::new(Kind::Format, message)
    }

    /// Prefixes the message with the file involved, keeping the kind.
    pub fn at(self, path: &std::path::Path) -> Self {
        Self::new(self.kind, format!("{}: {}", path.display(), self.message))
    }

    /// One line on stderr: `error kind=<kind> code=<n> message=<json string>`.
    pub fn report(&self) -> ExitCode {
        let message = serde_json::to_string(&self.message).unwrap_or_else(|_| "\"?\"".into());
        eprintln!(
            "error kind={} code={} message={message}",
            self.kind.as_str(),
            self.kind.code()
        );
        ExitCode::from(self.kind.code())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let kind = if matches!(e, FormatError::Io(_)) {
            Kind::Io
        } else {
            Kind::Format
        };
        Self::new(kind, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match e {
            EvalError::Io(_) => Kind::Io,
            EvalError::Parse { .. } => Kind::Format,
            _ => Kind::Validation,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Eval(inner) => inner.into(),
            other => Self::validation(other.to_string()),
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::validation(e.to_string())
            }
        })*
    };
}

validation_from!(EmbedError, ClusterError, IndexError, ScoreError, GradError);

/// Adapter for `map_err` that attributes a library error to `path`.
pub fn at<E: Into<CliError>>(path: &std::path::Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| e.into().at(path)
}
