//! Minimal differentiable tensor machinery backing the segmentation network.

pub mod conv;
pub mod optim;
pub mod resample;
pub mod tape;
pub mod tensor;

pub use optim::{Adam, AdamConfig};
pub use resample::{AxisMap, AxisTap, ResampleMap};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
