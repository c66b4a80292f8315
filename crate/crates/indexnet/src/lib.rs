pub mod batchnorm;
pub mod cnn;
pub mod data;
pub mod error;
pub mod fnn;
pub mod gradcheck;
pub mod network;
pub mod nn_math;
pub mod optim;
pub mod params;
pub mod rnn;
pub mod tensor;

pub use error::{Error, Result};
pub use params::Parameterized;
pub use tensor::Tensor;
