use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error("missing state tensor `{0}`")]
    MissingState(String),
    #[error("unexpected state tensor `{0}`")]
    UnexpectedState(String),
}
