//! Dense tensor substrate: shape-checked arithmetic, matrix products, batch
//! normalization, a seeded generator and a finite-difference oracle.

mod grad;
mod ops;
mod rng;
mod tensor;

pub use grad::{finite_diff_grad, max_rel_error};
pub use ops::{
    batch_norm, bn_backward, bn_forward, linear_rows, linear_rows_grad_input,
    linear_rows_grad_weight, matmul, BatchNormParams, BnCache,
};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
