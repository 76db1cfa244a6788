//! Dense tensors, kernels with analytic gradients, seeded randomness, and a
//! finite-difference checker.

pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, finite_diff_grad_extrapolated, max_relative_error, relative_error};
pub use kernels::{layer_norm, silu, silu_grad, softmax_xent, stats_pool, LayerNorm, StatsPool};
pub use rng::{gaussian_fill, Prng};
pub use tensor::{mac_count, matmul, matmul_nt, matmul_tn, reset_mac_count, Tensor};
