//! Dense numerics: matrices, a reverse-mode tape, the GRU cell and optimizers.

pub mod gradcheck;
pub mod gru;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod tape;

pub use gru::{gru_step, GruCellParams};
pub use matrix::{affine, dot, log_softmax_at, norm, sigmoid, softmax, Matrix};
pub use optim::{Method, OptimConfig, Optimizer};
pub use params::{glorot_uniform, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
