use crate::autodiff::AutodiffError;
use crate::nn::CheckpointError;
use crate::tasks::DataError;
use crate::tensor::ShapeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {class} has no support examples")]
    EmptyClass { class: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

impl Error {
    /// True when the error stems from user input rather than a numerical failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Autodiff(AutodiffError::Singular { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
