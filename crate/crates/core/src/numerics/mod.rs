//! Dense matrices, layer primitives, a recording tape with analytic
//! gradients, and a finite-difference checker.

pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{
    cross_attention, dense_forward, glorot_uniform, layer_norm, sigmoid, softmax_rows, Activation,
    LayerParams,
};
pub use matrix::Matrix;
pub use tape::{CustomOp, DenseIds, Gradients, ParamId, ParamStore, Tape, Var};
