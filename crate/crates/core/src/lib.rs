//! PairConnect: an attention-free sequence model that replaces dot-product
//! self-attention with hashed pairwise embedding-table lookups, plus a matched
//! Transformer-encoder baseline, a masked-language-modeling pipeline and a
//! single-thread inference benchmark.

// Widening casts to f64 are no-ops in the default build but not with the
// `f32` feature.
#![allow(clippy::unnecessary_cast)]

pub mod attention;
pub mod bench;
pub mod error;
pub mod hashing;
pub mod mlmdata;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod pairconnect;
pub mod training;

pub use error::{Error, Result};
