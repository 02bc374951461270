use std::path::Path;

use serde::Serialize;

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Data, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Numerical, message: message.into() }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::data(format!("{}: {err}", path.display()))
    }

    pub fn json(path: &Path, err: serde_json::Error) -> Self {
        CliError::data(format!("{}: {err}", path.display()))
    }

    /// The single stderr line printed before exiting.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line {
            error: ErrorKind,
            code: i32,
            message: String,
        }
        let message = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        serde_json::to_string(&Line { error: self.kind, code: self.kind.exit_code(), message })
            .expect("error line serializes")
    }
}

impl From<attnalign_core::Error> for CliError {
    fn from(e: attnalign_core::Error) -> Self {
        use attnalign_core::Error as E;
        let kind = match &e {
            E::NonFinite { .. } | E::Diverged { .. } => ErrorKind::Numerical,
            E::InvalidConfig(_)
            | E::LayerOutOfRange { .. }
            | E::InvalidHeadWeights(_)
            | E::InvalidMask(_)
            | E::TooFewSamples { .. } => ErrorKind::Usage,
            _ => ErrorKind::Data,
        };
        CliError { kind, message: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Attaches a path to IO failures.
pub trait PathContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> PathContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| CliError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_single_line_json() {
        let e = CliError::usage("bad\nflag   combination");
        let line = e.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "usage");
        assert_eq!(v["code"], 2);
        assert_eq!(v["message"], "bad flag combination");
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        let e: CliError = attnalign_core::Error::Diverged { epoch: 1, step: 2 }.into();
        assert_eq!(e.kind.exit_code(), 4);
        let e: CliError = attnalign_core::Error::OutOfVocab { id: 9, vocab: 3 }.into();
        assert_eq!(e.kind.exit_code(), 3);
        let e: CliError = attnalign_core::Error::TooFewSamples { samples: 1 }.into();
        assert_eq!(e.kind.exit_code(), 2);
    }
}
