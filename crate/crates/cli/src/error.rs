use std::fmt;
use std::path::PathBuf;

/// Pipeline stages, used to tag failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Calibrate,
    Train,
    Query,
    Sweep,
    Apply,
    Recover,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Calibrate => "calibrate",
            Stage::Train => "train",
            Stage::Query => "query",
            Stage::Sweep => "sweep",
            Stage::Apply => "apply",
            Stage::Recover => "recover",
            Stage::Eval => "eval",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("calibration artifact missing at {}; run `calibrate` first", .0.display())]
    CalibrationMissing(PathBuf),
    #[error("{what} missing at {}", .path.display())]
    MissingArtifact { what: &'static str, path: PathBuf },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("feature layout version {found} does not match supported version {expected}")]
    LayoutVersion { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<CliError>,
    },
    #[error(transparent)]
    Core(#[from] planforge_core::Error),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        CliError::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Stage of the outermost tag, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            CliError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// Innermost error beneath any stage tags.
    pub fn root(&self) -> &CliError {
        match self {
            CliError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> CliResult<T>;
}

impl<T> StageExt<T> for CliResult<T> {
    fn stage(self, stage: Stage) -> CliResult<T> {
        self.map_err(|e| CliError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
