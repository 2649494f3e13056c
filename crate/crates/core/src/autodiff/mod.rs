//! Dense arrays, a reverse-mode tape, convolution kernels, Adam and a
//! finite-difference gradient checker.

mod adam;
mod array;
pub mod conv;
mod gradcheck;
mod graph;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::Array;
pub use gradcheck::{check_gradients, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{selu, sigmoid, softmax, Gradients, Graph, Var, SELU_ALPHA, SELU_LAMBDA};
