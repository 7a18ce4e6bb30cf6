pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
