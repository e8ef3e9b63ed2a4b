//! Low/high-frequency complementary semi-supervised segmentation.
//!
//! The pipeline: a 2D wavelet transform splits each image into a
//! low-frequency reconstruction `I_L` and a high-frequency reconstruction
//! `I_H`; the two are blended into complementary fusion images
//! `x^L = I_L + alpha * I_H` and `x^H = I_H + beta * I_L`; the raw image and
//! the two fusions feed three UNet sub-networks (M, L, H) wired with
//! asymmetric feature-fusion modules; training combines a supervised dice
//! loss on labeled images with a cross-pseudo-supervision consistency loss
//! on unlabeled images, ramped by a linear lambda schedule.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nten;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
