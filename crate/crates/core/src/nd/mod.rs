//! Dense reverse-mode differentiation and the layers built on it.

mod adam;
mod gradcheck;
mod layers;
mod matrix;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use layers::{dense, dense_eval, gat_layer, init_dense, GatConfig, GatMerge, GatOutput, Mlp};
pub use matrix::Matrix;
pub use params::{glorot_uniform, ParamStore, Tensor};
pub use tape::{log_sum_exp, softmax, softmax_rows, Tape, Var};
