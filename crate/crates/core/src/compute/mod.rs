//! Numerical kernels, parameters, seeded randomness, and reverse-mode
//! differentiation.

mod graph;
mod param;
mod rng;
mod tape;
mod tensor;

pub use graph::{grad_check, Graph, ParamGrads};
pub use param::{ParamStore, Parameter};
pub use rng::RngStream;
pub use tape::{Grads, Tape, Var};
pub use tensor::{
    gelu, l2_normalize, layer_norm, log_softmax_rows, matmul, matmul_nt, matmul_tn,
    scaled_dot_attention, softmax_rows, Tensor,
};
