use std::fmt;

use koofu_core::classify::ClassifyError;
use koofu_core::dataio::DataError;
use koofu_core::eval::EvalError;
use koofu_core::stats::StatsError;
use koofu_core::transform::FitError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Validation,
    Numeric,
    Io,
}

/// A failure with its exit code: 2 validation, 3 numeric, 4 I/O.
#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Validation,
            message: msg.into(),
        }
    }

    pub fn code(&self) -> u8 {
        match self.kind {
            Kind::Validation => 2,
            Kind::Numeric => 3,
            Kind::Io => 4,
        }
    }

    /// Prefixes the message with the file or stage it concerns.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            kind: Kind::Io,
            message: e.to_string(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match e {
            DataError::Io(_) => Kind::Io,
            _ => Kind::Validation,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::NonPositiveEigenvalue {
                suggested_lambda, ..
            } => CliError {
                kind: Kind::Numeric,
                message: format!("{e}\nsuggested lambda: {suggested_lambda}"),
            },
            FitError::Stats(s) => s.into(),
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<ClassifyError> for CliError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::Data(d) => d.into(),
            ClassifyError::Fit(f) => f.into(),
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::validation(e.to_string())
    }
}
