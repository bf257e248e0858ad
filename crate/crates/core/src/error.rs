use std::path::PathBuf;

use crate::library::PairKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),

    #[error("catalog line {line}: {msg}")]
    Catalog { line: usize, msg: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("program `{0}` has an empty loop body")]
    EmptyLoop(String),

    #[error(
        "path enumeration over {branches} unresolved branch(es) exceeds the cap of {cap} paths"
    )]
    PathExplosion { branches: usize, cap: usize },

    #[error("path does not terminate: instruction {0} revisited within one iteration")]
    NonTerminating(usize),

    #[error("position {position} out of range for path of length {len}")]
    Position { position: usize, len: usize },

    #[error("invalid emission config: {0}")]
    Config(String),

    #[error("library is missing {} pair(s): {}", .0.len(), fmt_pairs(.0))]
    Coverage(Vec<PairKey>),

    #[error("segmentation out of bounds: {0}")]
    Segmentation(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("NED undefined: both vectors are constant")]
    UndefinedDistance,

    #[error("fold plan: {0}")]
    Plan(String),

    #[error("archive format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_pairs(pairs: &[PairKey]) -> String {
    pairs
        .iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
