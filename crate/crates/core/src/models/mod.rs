//! Toy conditional denoiser with a contour branch, MLP classifier, pluggable
//! decoder, their training loops and the flat weight format.

mod classifier;
mod decoder;
mod denoiser;
mod optim;
mod weights;

use thiserror::Error;

use crate::tensor::TensorError;

pub use classifier::{train_classifier, Classifier, ClassifierConfig, ClassifierTraining};
pub use decoder::Decoder;
pub use denoiser::{
    time_embedding, train_denoiser, Denoiser, DenoiserConfig, DenoiserData, DenoiserTraining,
};
pub use optim::{Optimizer, OptimizerKind};
pub use weights::{read_weights, write_weights, NamedTensors, WEIGHTS_MAGIC, WEIGHTS_VERSION};

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected {expected} values per row, got shape {got:?}")]
    Shape { expected: usize, got: Vec<usize> },
    #[error("class {class} out of range for {classes} classes")]
    UnknownClass { class: usize, classes: usize },
    #[error("style {style} out of range for {styles} styles")]
    UnknownStyle { style: usize, styles: usize },
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Text-side condition: a class id and a style id, either of which may be
/// the null marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Conditioning {
    pub class_id: Option<usize>,
    pub style_id: Option<usize>,
}

impl Conditioning {
    pub fn new(class_id: usize, style_id: usize) -> Self {
        Self {
            class_id: Some(class_id),
            style_id: Some(style_id),
        }
    }

    pub fn null() -> Self {
        Self::default()
    }

    pub fn is_null(&self) -> bool {
        self.class_id.is_none() && self.style_id.is_none()
    }
}

pub(crate) fn check_rows(x: &crate::tensor::Tensor, width: usize) -> Result<usize, ModelError> {
    match x.shape() {
        &[n, w] if w == width => Ok(n),
        other => Err(ModelError::Shape {
            expected: width,
            got: other.to_vec(),
        }),
    }
}
