//! Dense-matrix numerics with a reverse-mode tape and attention layers.

pub mod gradcheck;
mod matrix;
mod nn;
mod optim;
mod tape;

pub use matrix::{gelu, gelu_derivative, Matrix, LAYER_NORM_EPS};
pub use nn::{
    zero_params, AttentionConfig, Bound, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    ParamId, ParamStore, DEFAULT_INIT_STD,
};
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Gradients, RowMix, Tape, Var};
