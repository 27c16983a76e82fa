//! Minimal deterministic reverse-mode autodiff over `f64` tensors.

mod conv;
pub mod gradcheck;
pub(crate) mod linalg;
mod sampling;
mod tape;
mod tensor;

pub use linalg::{sigmoid, softplus};
pub use sampling::MsdaLayout;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
