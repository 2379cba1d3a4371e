//! Hand-rolled differentiable layers, tensors, optimizer and gradient checks.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::HasParams;
pub use layers::{Conv2d, Init, InstanceNorm, Linear, Param};
pub use tensor::{Scalar, Tensor};
