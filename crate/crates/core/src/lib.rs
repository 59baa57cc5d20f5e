pub mod adjoint;
pub mod autodiff;
pub mod bptt;
pub mod error;
pub mod experiments;
pub mod field;
pub mod lab;
pub mod model;
pub mod solver;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
