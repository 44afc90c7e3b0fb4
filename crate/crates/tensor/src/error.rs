use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    Invalid(String),

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("{op}: value {value} outside {domain}")]
    Domain {
        op: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
