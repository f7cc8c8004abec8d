use thiserror::Error;

/// Errors produced anywhere in the codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("coordinate {coord:?} does not fit in {bitdepth} bits")]
    CoordOutOfRange { coord: [u32; 3], bitdepth: u8 },
    #[error("stage index {0} outside 1..=8")]
    StageOutOfRange(usize),
    #[error("parents are not the downsampled children")]
    ParentMismatch,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("operands live on different coordinate sets")]
    CoordinateMismatch,
    #[error("loss node is not a scalar")]
    NonScalarLoss,
    #[error("parent {index} has no occupied child (corrupt stream)")]
    EmptyParent { index: usize },
    #[error("arithmetic stream truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("parameter stream corrupt at symbol {position}")]
    ParamDecode { position: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("pretrained asset checksum mismatch")]
    ChecksumMismatch,
    #[error("training diverged (non-finite loss) at epoch {epoch}, seed {seed}")]
    Diverged { epoch: usize, seed: u64 },
    #[error("PLY parse error: {0}")]
    Ply(String),
    #[error("Time-Bpp curves do not overlap")]
    NoOverlap,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
