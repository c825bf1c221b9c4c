//! Post-training quantization with instance-aware group quantizers for
//! vision-transformer activations and softmax attentions.

// `!(x >= 0.0)` style checks are there to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod bops;
pub mod error;
pub mod eval;
pub mod igq;
pub mod quant;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
