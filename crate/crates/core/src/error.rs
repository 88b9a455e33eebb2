use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence has {len} frames but {target} were requested")]
    SequenceTooShort { len: usize, target: usize },
    #[error("target length must be at least 1")]
    EmptyTarget,
    #[error("sequence has no frames")]
    EmptySequence,
    #[error("pose must have exactly 18 joints, got {0}")]
    JointCount(usize),
    #[error("non-finite coordinate at joint {joint}")]
    NonFiniteCoordinate { joint: usize },
    #[error("invalid anatomy map: {0}")]
    InvalidAnatomyMap(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("degenerate dataset statistics: mean height {mean_height:e} is below 1e-6")]
    DegenerateStats { mean_height: f64 },
    #[error("invalid frame geometry {width}x{height}")]
    BadGeometry { width: f64, height: f64 },
    #[error("degenerate height {height:e} at frame {frame}")]
    DegenerateHeight { frame: usize, height: f64 },
    #[error("normalization `{scheme}` requires {needs}")]
    MissingContext { scheme: String, needs: &'static str },
    #[error("unknown normalization scheme `{0}`")]
    UnknownScheme(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("expected sequences of length {expected}, got {got}")]
    SequenceLength { expected: usize, got: usize },
    #[error("no anchor in the batch has both a positive and a negative")]
    NoValidTriplets,
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("PK sampling needs {needed} identities with at least {min_samples} samples, found {available}")]
    InsufficientIdentities {
        needed: usize,
        min_samples: usize,
        available: usize,
    },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("probe subjects absent from the gallery: {0:?}")]
    OpenSetProbe(Vec<String>),
    #[error("confound spec infeasible: {0}")]
    ConfoundInfeasible(String),
    #[error("malformed record at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] gaitlab_autodiff::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the failure comes from degenerate data (zero heights,
    /// collapsed statistics) rather than malformed input.
    pub fn is_degenerate_data(&self) -> bool {
        matches!(
            self,
            Error::DegenerateHeight { .. }
                | Error::DegenerateStats { .. }
                | Error::Autodiff(gaitlab_autodiff::Error::DegenerateEmbedding { .. })
        )
    }
}
