pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod norm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
