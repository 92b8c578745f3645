pub mod alloc;
pub mod error;
pub mod harness;
pub mod priors;
pub mod ptq;
pub mod quant;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{AdamState, Primitive, Tensor};
