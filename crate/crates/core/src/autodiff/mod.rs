//! Reverse-mode automatic differentiation over dense `f64` tensors, the
//! Adam optimizer, and a central-difference gradient checker.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{decayed_lr, Adam};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use params::{BoundParams, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
