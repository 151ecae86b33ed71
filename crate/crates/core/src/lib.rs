pub mod error;
pub mod gessl;
pub mod gradcheck;
pub mod harness;
pub mod hypergrad;
pub mod losses;
pub mod models;
pub mod rng;
pub mod sigma;
pub mod taskgen;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
