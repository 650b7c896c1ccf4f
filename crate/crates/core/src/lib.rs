//! Latent domain augmentation over joint image/text embeddings.
// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augnet;
pub mod container;
pub mod error;
pub mod eval;
pub mod probe;
pub mod store;
pub mod synth;
pub mod zeroshot;

pub use error::{Error, ErrorClass, Result};
