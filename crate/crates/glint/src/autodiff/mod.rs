//! Reverse-mode autodiff over 2-D tensors, generic over f32/f64.
//!
//! Training runs in f32; gradient checks instantiate the same graphs in f64
//! against central finite differences.  There is no higher-order machinery:
//! where a loss needs spatial input gradients (normals, eikonal), the network
//! emits the input-gradient chain as explicit first-order ops, so one plain
//! backward pass differentiates through them exactly.

mod penc;
mod real;
mod tape;
mod tensor;

pub use penc::PosEnc;
pub use real::Real;
pub use tape::{Grads, NodeId, Tape};
pub use tensor::Tensor;
