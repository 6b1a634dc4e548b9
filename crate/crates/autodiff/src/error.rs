use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("stale tape handle: node belongs to generation {node}, tape is at generation {tape}")]
    StaleTape { node: u64, tape: u64 },

    #[error("{op}: operands are recorded on different tapes")]
    TapeMismatch { op: &'static str },

    #[error("{op}: domain error at index {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{op}: non-finite result at index {index}")]
    NonFinite { op: &'static str, index: usize },
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AutodiffError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        AutodiffError::Contract {
            op,
            msg: msg.into(),
        }
    }
}
