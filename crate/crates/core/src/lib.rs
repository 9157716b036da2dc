//! Dense-block UNet traffic map forecaster.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape.
//! * [`nn`]: convolution layers, dense blocks and deconvolution blocks.
//! * [`model`]: the UNet, its variants, shape inference and checkpoints.
//! * [`data`]: day files, input/output encodings, windows, augmentation and
//!   the synthetic city generator.
//! * [`train`]: losses, Adam, the plateau schedule and training loops.
//! * [`eval`]: the normalized MSE metric, baselines, reports and prediction.
//! * [`cli`]: the `traffic-unet` command line.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
