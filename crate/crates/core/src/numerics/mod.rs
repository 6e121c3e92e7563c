//! Differentiable `f64` array operations with a reverse-mode tape.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use kernels::{gaussian_blur, sample_bilinear};
pub use tape::{stack, Gradients, Tape, Var, DEFAULT_SAMPLES_PER_BIN, EPSILON_NORM};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
