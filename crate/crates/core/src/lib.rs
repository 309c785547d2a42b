pub mod autodiff;
pub mod calib;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod oracle;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Layer, ModelGraph};
pub use tensor::{Batch, Tensor};
