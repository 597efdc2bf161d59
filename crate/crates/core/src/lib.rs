pub mod autodiff;
pub mod config;
pub mod datakit;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod losses;
pub mod masking;
pub mod network;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Matrix;
