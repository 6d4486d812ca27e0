use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Input shapes are not valid for the primitive.
    #[error("{op}: expected {expected}, got shapes {got:?}")]
    Shape {
        op: &'static str,
        expected: String,
        got: Vec<Vec<usize>>,
    },

    /// Element buffer does not match the declared shape.
    #[error("buffer of {len} elements does not fit shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },

    /// A NaN or infinite value reached a graph boundary.
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    Attr { op: &'static str, msg: String },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: &[&[usize]]) -> Self {
        TensorError::Shape {
            op,
            expected: expected.into(),
            got: got.iter().map(|s| s.to_vec()).collect(),
        }
    }
}
