//! Two-stream segmentation network with a depth decoder and depth-aware modulation.

pub mod checkpoint;
pub mod network;
pub mod state;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use network::{encode_image, forward, modulate, ForwardOutput, Graph, NormModes, NormUpdate};
pub use state::{init_model, Component, ComponentSet, ModelConfig, ModelState, NormKind, Param, ParamKind};
