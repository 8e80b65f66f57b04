//! Minimal tensor autodiff engine backing the voxel embedding and the 3D supernet.

pub mod kernels;
pub mod tape;
pub mod tensor;

pub use kernels::ConvSpec;
pub use tape::{AxisMaps, Gradients, NormMode, Tape, Var};
pub use tensor::Tensor;
