//! Branchformer speech encoder: parallel global (self-attention) and local
//! (convolutional gating MLP) branches merged per block, built on a small
//! f64 reverse-mode autodiff tape.

pub mod analysis;
pub mod attention;
pub mod bench;
pub mod cgmlp;
pub mod checkpoint;
pub mod error;
pub mod encoder;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Generator used for every seeded draw in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;
