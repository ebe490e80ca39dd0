//! Weight binarization, learnable attention scales, bit packing and the
//! packed binary-linear kernel.

mod lambda;
mod linear;
mod packed;
mod weights;

pub use lambda::{apply_lambda, apply_lambda_backward, LambdaScale};
pub use linear::{BinaryLinear, LinearCache, WeightMode};
pub use packed::{packed_linear, Alphabet, PackedBits, PACKED_MAGIC};
pub use weights::{
    binarize_weights, binary_signs, standardize, ste_backward, StandardizeMode, Standardization,
};
