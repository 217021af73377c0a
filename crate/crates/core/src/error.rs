use bella_numcore::NumError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, BellaError>;

#[derive(Debug, Error)]
pub enum BellaError {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("actor {id} at ({x}, {y}) is outside the grid extent")]
    OutsideExtent { id: u32, x: f64, y: f64 },

    #[error("position (0, 0) has no quadrant")]
    OriginQuadrant,

    #[error("out-of-vocabulary word `{0}`")]
    OutOfVocabulary(String),

    #[error("invalid token id {0}")]
    InvalidToken(usize),

    #[error("unrecognized question: `{0}`")]
    UnknownQuestion(String),

    #[error("question `{question}` matches {matches} actors, expected exactly one")]
    AmbiguousReference { question: String, matches: usize },

    #[error("sequence of {len} tokens exceeds the context length {max} ({detail})")]
    SequenceTooLong { len: usize, max: usize, detail: String },

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("LoRA adapters were already merged into these weights")]
    AlreadyMerged,

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),

    #[error("corpus needs at least 2 items, got {0}")]
    CorpusTooSmall(usize),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl BellaError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        BellaError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
