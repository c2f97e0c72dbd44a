//! From-scratch convolutional auto-encoder for binary segmentation of
//! seismic images, trained with sigmoid cross-entropy and ADADELTA.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Result, SaltError};
pub use tensor::{PoolIndices, Tensor};
