use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Pipeline stage an error is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Split,
    Train,
    Calibrate,
    Synthesize,
    Verify,
    Tighten,
    Solve,
    Validate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Load => "load",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Synthesize => "synthesize",
            Stage::Verify => "verify",
            Stage::Tighten => "tighten",
            Stage::Solve => "solve",
            Stage::Validate => "validate",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: cpcontrol::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {message}", .path.display())]
    Schema { path: PathBuf, message: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for infeasible or insufficient-data outcomes, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Stage { source, .. } if source.is_analytic_outcome() => 2,
            _ => 1,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            CliError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Attach a stage to core errors.
pub trait AtStage<T> {
    fn at(self, stage: Stage) -> CliResult<T>;
}

impl<T> AtStage<T> for cpcontrol::Result<T> {
    fn at(self, stage: Stage) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
