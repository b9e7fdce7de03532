//! Synthetic domain-shifted datasets, rotation augmentation and IDX I/O.

mod generate;
mod glyphs;
pub mod idx;
mod rotate;

pub use generate::{generate_shifted_shapes, DatasetSpec, DomainShift, ShiftedShapes, MAX_CLASSES};
pub use rotate::{augment_batch, rotate_image, AugmentedBatch, NUM_ROTATIONS};

use std::fmt;

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image with whatever annotations the caller is allowed to see.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: Option<usize>,
    pub domain: Domain,
    /// Quarter turns applied by [`rotate_image`]; `None` for unrotated images.
    pub rot_label: Option<u8>,
}

/// Unlabeled target images, the only form in which target data reaches
/// the training loss. The type has no label field.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnlabeledSet {
    images: Vec<Tensor>,
}

impl UnlabeledSet {
    /// Rejects any example that carries a class label or is not a target
    /// image.
    pub fn from_examples(examples: &[Example]) -> Result<Self, DataError> {
        let mut images = Vec::with_capacity(examples.len());
        for (index, ex) in examples.iter().enumerate() {
            if ex.label.is_some() {
                return Err(DataError::LabelLeak { index });
            }
            if ex.domain != Domain::Target {
                return Err(DataError::WrongDomain {
                    index,
                    expected: Domain::Target,
                });
            }
            images.push(ex.image.clone());
        }
        Ok(Self { images })
    }

    /// Drops the labels of labeled target examples.
    pub fn strip_labels(examples: &[Example]) -> Self {
        Self {
            images: examples.iter().map(|e| e.image.clone()).collect(),
        }
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("rotation label {0} outside 0..=3")]
    RotationOutOfRange(u8),
    #[error("rotation needs a square image, got {h}x{w}")]
    NotSquare { h: usize, w: usize },
    #[error("image tensor must be HxW or CxHxW, got {0:?}")]
    ImageShape(Vec<usize>),
    #[error("example {index} carries a target label; labels may not reach training")]
    LabelLeak { index: usize },
    #[error("example {index} is not a {expected} example")]
    WrongDomain { index: usize, expected: Domain },
    #[error(transparent)]
    Idx(#[from] idx::IdxError),
}
