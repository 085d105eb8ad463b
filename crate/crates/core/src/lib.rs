pub mod data;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod net;
pub mod rng;
pub mod strategies;
pub mod tensor;

pub use tensor::{Graph, Tensor, TensorError, Var};
