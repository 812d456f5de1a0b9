use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),

    #[error("planning infeasible: {0}")]
    PlanningInfeasible(String),

    #[error("optimizer diverged at iteration {iteration}: objective {value}")]
    Divergence { iteration: usize, value: f64 },

    #[error("augmentation left the workspace")]
    OutOfWorkspace,

    #[error("lexicon error: {0}")]
    Lexicon(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{}: {cause}", path.display())]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}
