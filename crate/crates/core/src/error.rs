use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("table has no data rows")]
    EmptyTable,
    #[error("ragged rows: row {row} has {found} fields, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("csv error: {0}")]
    Csv(String),
    #[error("label `{0}` is not in the declared label space")]
    UnknownLabel(String),
    #[error("duplicate label `{0}` in label space")]
    DuplicateLabel(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("column {0} has no values")]
    EmptyColumn(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("fraction {0} is outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("token budget {budget} cannot hold the prompt scaffold, labels, and one value (needs {needed})")]
    BudgetTooSmall { budget: usize, needed: usize },
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid prompt components: {0}")]
    InvalidPrompt(String),
    #[error("template parse error: {0}")]
    TemplateParse(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sequence of {len} tokens exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("rank {rank} is not below the smallest target dimension {min_dim}")]
    RankTooLarge { rank: usize, min_dim: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { loss: f64, epoch: usize, batch: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("stale or mismatched artifact: {0}")]
    Fingerprint(String),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
