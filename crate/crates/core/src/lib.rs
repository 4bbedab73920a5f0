//! Salient object detection with a wide, shallow encoder-decoder trained
//! from scratch: dilated-convolution feature aggregation, pyramid attention,
//! local processing, and cross-feature fusion over a self-contained rank-4
//! tensor autodiff engine, plus the weighted loss suite, evaluation metrics,
//! and data plumbing needed to train and score it.

pub mod audit;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod netpbm;
pub mod network;
pub mod rng;
pub mod scalar;
pub mod shape;
pub mod swt;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use shape::Shape;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
