use crate::data::DataError;

/// Exit status of the command-line tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{context}: {source}")]
    Library { context: String, source: randdisc::Error },
    #[error("{path}: {message}")]
    Output { path: String, message: String },
}

impl HarnessError {
    pub fn library(context: impl Into<String>, source: randdisc::Error) -> Self {
        HarnessError::Library {
            context: context.into(),
            source,
        }
    }

    pub fn exit_kind(&self) -> ExitKind {
        use randdisc::Error as E;
        match self {
            HarnessError::Usage(_) => ExitKind::Usage,
            HarnessError::Data(_) | HarnessError::Output { .. } => ExitKind::Data,
            HarnessError::Library { source, .. } => match source {
                E::Numerical(_) => ExitKind::Numerical,
                E::Checkpoint(_) | E::ShapeMismatch { .. } | E::LabelOutOfRange { .. } | E::Empty(_) => ExitKind::Data,
                E::InvalidParameter { .. } | E::NotDifferentiable(_) | E::Uncertifiable(_) => ExitKind::Usage,
            },
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Attaches experiment context to library errors.
pub(crate) trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for randdisc::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| HarnessError::library(what(), e))
    }
}
