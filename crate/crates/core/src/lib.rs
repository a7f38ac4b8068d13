//! Learning-based channel pruning for small convolutional networks.
//!
//! Every prunable convolution carries a continuous remaining ratio `R_i`.
//! A differentiable channel mask turns `R_i` into per-channel multipliers,
//! a FLOPs cost penalizes large ratios, and an alternating optimizer updates
//! weights on training batches and ratios on validation batches. The final
//! ratios are rounded into a pruning plan, the network is physically sliced,
//! and the smaller model is fine-tuned.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod masking;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod pruner;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
