use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("cannot reshape {from:?} ({} elements) into {to:?} ({} elements)", .from.iter().product::<usize>(), .to.iter().product::<usize>())]
    ElementCount { from: Vec<usize>, to: Vec<usize> },

    #[error("invalid axis permutation {order:?} for rank {rank}")]
    InvalidPermutation { order: Vec<usize>, rank: usize },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {value}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("diverged at iteration {iteration}: loss {loss} exceeds {limit}")]
    Diverged {
        iteration: usize,
        loss: f64,
        limit: f64,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::Diverged { .. })
    }
}
