pub mod data;
pub mod dct;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod networks;
pub mod noise;
pub mod par;
pub mod rng;
pub mod schemes;
pub mod tensor_core;

pub use error::{Error, Result};
pub use tensor_core::{Tape, Tensor, Var};
