//! Self-supervised domain adaptation with consistency training.
//!
//! A small multi-head convolutional network is trained on labeled source
//! images and unlabeled, distribution-shifted target images. The target
//! images drive three auxiliary objectives: predicting which 90-degree
//! rotation was applied, agreeing with its own detached prediction on the
//! unrotated image (KL consistency), and confident predictions (entropy
//! minimization).

pub mod autodiff;
pub mod data;
pub mod losses;
pub mod network;
pub mod trainer;
