//! Dense tensors, a reverse-mode tape, MLPs and Adam.

mod adam;
mod mlp;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use mlp::{Activation, MlpModel, MlpRecord, MlpVars};
pub use tape::{Gradients, Tape, Var, SIGMOID_EPS};
pub use tensor::{matmul, Tensor};
