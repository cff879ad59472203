use thiserror::Error;

/// Every failure the pipeline can report, grouped by the kind of caller
/// action it calls for.
#[derive(Debug, Error)]
pub enum MolexError {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("token not in vocabulary: {0}")]
    Vocab(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("state error: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<MolexError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MolexError {
    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        MolexError::Parse {
            offset,
            msg: msg.into(),
        }
    }

    /// Innermost error with any stage wrappers stripped.
    pub fn root(&self) -> &MolexError {
        match self {
            MolexError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        MolexError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, MolexError>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MolexError::Numeric(format!("non-finite value in {what}")))
    }
}
