use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("buffer is empty")]
    EmptyBuffer,
    #[error("class {class} has no labeled source samples")]
    Coverage { class: usize },
    #[error("checkpoint does not match: {0}")]
    Checkpoint(String),
    #[error("source pretraining reached {accuracy:.4} held-out accuracy, below the floor {floor:.4}")]
    PretrainFailed { accuracy: f64, floor: f64 },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            found,
        }
    }
}
