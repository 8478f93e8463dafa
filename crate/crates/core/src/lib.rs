//! Unsupervised content-style decomposition on structured data.
//!
//! The pipeline tokenizes structured input, splits it into a
//! permutation-invariant style set (cross-attention onto learned prototypes)
//! and a discrete content code array (product vector quantization under
//! structural constraints), and reconstructs through a link-attention
//! decoder over a learnable content-style bipartite graph. Everything runs
//! on a small f64 tensor engine with tape-based reverse-mode differentiation
//! so that gradients are verifiable against finite differences.

pub mod analysis;
pub mod attention;
pub mod data;
pub mod export;
pub mod checkpoint;
pub mod config;
pub mod constraints;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod quantizer;
pub mod seeding;
pub mod tape;
pub mod train;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{Result, Tensor, TensorError};
