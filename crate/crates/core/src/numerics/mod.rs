//! Dense f64 tensors, a reverse-mode tape, and the finite-difference oracle
//! every differentiable component is validated against.

mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{sigmoid, Gradients, Graph, ParamGrads, Var};
pub use params::{Optimizer, OptimizerKind, ParamEntry, ParamId, ParamStore};
pub use rng::{splitmix64, Rng};
pub use tensor::{layer_norm, softmax_rows, Tensor};
