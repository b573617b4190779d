use std::fmt::Display;

use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Upstream,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(e: impl Display) -> Self {
        CliError { kind: ErrorKind::Usage, message: e.to_string() }
    }

    pub fn data(e: impl Display) -> Self {
        CliError { kind: ErrorKind::Data, message: e.to_string() }
    }

    pub fn upstream(e: impl Display) -> Self {
        CliError { kind: ErrorKind::Upstream, message: e.to_string() }
    }

    /// Data error unless `upstream` says otherwise.
    pub fn classify(e: impl Display, upstream: bool) -> Self {
        if upstream {
            Self::upstream(e)
        } else {
            Self::data(e)
        }
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Upstream => 4,
        }
    }

    pub fn to_json(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Upstream => "upstream",
        };
        json!({"error": {"kind": kind, "code": self.code(), "message": self.message}}).to_string()
    }
}
