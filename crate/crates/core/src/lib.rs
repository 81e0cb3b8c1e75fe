pub mod accup;
pub mod adapt;
pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;
