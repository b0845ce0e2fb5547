pub mod alignment;
pub mod checkpoint;
pub mod connectors;
pub mod data;
pub mod decode;
pub mod error;
pub mod foundation;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Tensor, Var};
