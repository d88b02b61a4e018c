use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
///
/// The variants are grouped by what the command line maps them to: bad
/// configuration, a missing upstream artifact, corrupt data, or a contract
/// violation on the inputs of a numeric routine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("utterance too short: {samples} samples, need at least {window}")]
    UtteranceTooShort { samples: usize, window: usize },
    #[error("corrupt waveform: {0}")]
    CorruptWaveform(String),
    #[error("segment exceeds utterance: [{start}, {end}) vs {frames} frames")]
    SegmentOutOfBounds {
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error("caption below minimum duration: {frames} frames, need at least {min}")]
    CaptionTooShort { frames: usize, min: usize },
    #[error("degenerate embedding (pre-normalization norm {0:e})")]
    DegenerateEmbedding(f64),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDimension { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("batch too small for impostors: {0}")]
    BatchTooSmall(usize),
    #[error("invalid score at index {0}")]
    InvalidScore(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate image dimensions {width}x{height}")]
    DegenerateImage { width: u32, height: u32 },
    #[error("zero-length interval [{0}, {1})")]
    EmptyInterval(usize, usize),
    #[error("k exceeds distinct points: k = {k}, distinct = {distinct}")]
    TooFewPoints { k: usize, distinct: usize },
    #[error("empty cluster {0}")]
    EmptyCluster(usize),
    #[error("K = {k} exceeds corpus size {n}")]
    RecallCutoff { k: usize, n: usize },
    #[error("taxonomy not acyclic (cycle through {0})")]
    TaxonomyCycle(String),
    #[error("corrupt alignment: {0}")]
    CorruptAlignment(String),
    #[error("malformed taxonomy: {0}")]
    CorruptTaxonomy(String),
    #[error("corrupt dataset manifest: {0}")]
    CorruptManifest(String),
    #[error("infeasible corpus spec: {0}")]
    InfeasibleSpec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("checksum mismatch in tensor '{0}'")]
    Checksum(String),
    #[error("corrupt tensor container: {0}")]
    CorruptContainer(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line: 2 config, 3 missing artifact,
    /// 4 data corruption, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InfeasibleSpec(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Checksum(_)
            | Error::CorruptContainer(_)
            | Error::CorruptManifest(_)
            | Error::CorruptAlignment(_)
            | Error::CorruptTaxonomy(_)
            | Error::CorruptWaveform(_)
            | Error::FeatureDimension { .. }
            | Error::Json { .. } => 4,
            _ => 1,
        }
    }
}
