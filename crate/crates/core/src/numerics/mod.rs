//! Dense arrays, a reverse-mode tape, and parameter sets with optimizers.

mod params;
mod tape;
mod tensor;

pub use params::{NamedArray, OptimizerKind, Param, ParamSet, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{BinaryOp, ElementwiseOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::{broadcast_shape, Tensor};
