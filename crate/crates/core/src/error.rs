use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A scalar parameter is outside its admissible range.
    Parameter {
        name: &'static str,
        value: f64,
    },
    InsufficientSamples {
        op: &'static str,
        needed: usize,
        got: usize,
    },
    /// `q` is zero where `p` carries mass.
    DivergenceUndefined {
        index: usize,
    },
    /// A caller-side contract was violated (non-scalar root, missing labels, ...).
    Contract(String),
    /// A row expected to be unit-norm is not.
    Normalization {
        which: &'static str,
        row: usize,
        norm: f64,
    },
    /// Image side is not a multiple of the patch size.
    Tiling {
        height: usize,
        width: usize,
        patch: usize,
    },
    /// Positional bank does not match the token count.
    Positional {
        scale_index: usize,
        bank_rows: usize,
        tokens: usize,
    },
    /// Token count is not a perfect square grid.
    Grid {
        tokens: usize,
    },
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    /// Target vector is not one-hot.
    Label(String),
    /// Degenerate or invalid dataset/config specification.
    Spec(String),
    /// A loss term became NaN or infinite.
    NonFinite {
        term: &'static str,
        step: usize,
    },
    Empty(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch between {lhs:?} and {rhs:?}")
            }
            Self::Parameter { name, value } => write!(f, "invalid parameter {name} = {value}"),
            Self::InsufficientSamples { op, needed, got } => {
                write!(f, "{op}: needs at least {needed} samples, got {got}")
            }
            Self::DivergenceUndefined { index } => {
                write!(f, "divergence undefined: q[{index}] = 0 where p[{index}] > 0")
            }
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::Normalization { which, row, norm } => {
                write!(f, "{which} row {row} is not unit-norm (norm = {norm})")
            }
            Self::Tiling { height, width, patch } => {
                write!(f, "image {height}x{width} cannot be tiled by {patch}x{patch} patches")
            }
            Self::Positional {
                scale_index,
                bank_rows,
                tokens,
            } => write!(
                f,
                "positional bank {scale_index} has {bank_rows} rows but sequence has {tokens} tokens"
            ),
            Self::Grid { tokens } => write!(f, "{tokens} patch tokens do not form a square grid"),
            Self::IndexOutOfRange { what, index, len } => {
                write!(f, "{what} index {index} out of range (len {len})")
            }
            Self::Label(msg) => write!(f, "label error: {msg}"),
            Self::Spec(msg) => write!(f, "invalid spec: {msg}"),
            Self::NonFinite { term, step } => {
                write!(f, "non-finite value in loss term {term} at step {step}")
            }
            Self::Empty(what) => write!(f, "{what} is empty"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
