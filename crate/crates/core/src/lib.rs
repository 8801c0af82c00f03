pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, NodeId, Tape, Tensor, Var};
pub mod vit;
pub mod guidance;
pub mod data;
pub mod augment;
pub mod eval;
pub mod train;
pub mod cli;
