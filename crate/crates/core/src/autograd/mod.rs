//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod norm;
mod shape;
mod softmax;
mod tape;

pub use gradcheck::{
    check_gradients, check_module_gradients, check_module_gradients_kink_aware, directional_check, GradReport,
};
pub use linalg::bmm;
pub use norm::BatchNormStats;
pub use shape::permute_data;
pub use tape::{Gradients, Module, Param, ParamId, Tape, Var};

pub(crate) use softmax::softmax_rows;
