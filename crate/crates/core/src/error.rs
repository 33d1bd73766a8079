use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0} input")]
    NumericDomain(&'static str),

    #[error("index {id} out of range for table of {size} rows")]
    Index { id: usize, size: usize },

    #[error("objective is empty: every position is masked")]
    EmptyObjective,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("sequence of length {needed} exceeds context length {max}")]
    ContextLength { needed: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("record {question_id}: missing or invalid field `{field}`")]
    Schema { field: String, question_id: String },

    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("record {question_id}: answer key `{key}` is not among the options")]
    DanglingAnswer { question_id: String, key: String },

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },

    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },

    #[error("image {path}: {message}")]
    Image { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures caused by the filesystem rather than by the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
