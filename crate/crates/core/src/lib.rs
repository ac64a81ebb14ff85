//! Few-shot learning with interval bound propagation.

pub mod error;
pub mod harness;
pub mod episodes;
pub mod ibpi;
pub mod interval;
pub mod learners;
pub mod objective;
pub mod tensor;

pub use error::{Error, Result};
