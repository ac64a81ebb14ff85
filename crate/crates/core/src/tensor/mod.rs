//! Dense `f64` tensors, a reverse-mode tape, the layer set and optimizers.

pub mod checkpoint;
mod dense;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod tape;

pub use checkpoint::{Checkpoint, RngDescriptor};
pub use dense::Tensor;
pub use nn::{forward, LayerSpec, Network};
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Tape, Var};
