//! Dense tensors, a reverse-mode tape, parameters, Adam and checkpoints.

mod adam;
pub mod checkpoint;
mod conv;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::conv2d;
pub use gradcheck::{grad_check, GradCheck, REL_FLOOR};
pub use param::{init_params, InitFamily, InitSpec, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, softmax, top_k, Tensor};
