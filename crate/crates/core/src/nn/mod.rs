//! CPU neural-network engine covering the layer set the classifiers need:
//! valid 1D convolution, max pooling, dense, LSTM, dropout, ReLU and softmax
//! cross-entropy, each with an explicit backward pass, plus an L2 penalty and
//! the Adam optimizer.
//!
//! Everything is generic over [`Scalar`] so the same code trains in `f32` and
//! runs gradient checks in `f64`.

pub mod activation;
pub mod adam;
pub mod block;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod fpenv;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod pool;
pub mod regularization;
pub mod scalar;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use dropout::DropoutMode;
pub use fpenv::FlushDenormals;
pub use lstm::{Direction, LstmParams};
pub use scalar::Scalar;
pub use tensor::Tensor;
