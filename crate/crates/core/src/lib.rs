//! Two-branch attribute-conditioned image retrieval.
//!
//! A coarse region branch locates the image area relevant to a queried
//! attribute via attribute-guided spatial attention and pools it into
//! foreground/background embeddings. The attended area is cropped, amplified
//! and re-encoded patch-wise by a fine branch with an attribute cross-attention
//! head. Training combines per-branch triplet losses with a cross-branch
//! InfoNCE variant that also repels foreground embeddings from in-batch
//! background embeddings. Retrieval fuses the two branch similarities and is
//! scored with mean average precision.
//!
//! Everything runs in `f64` on the CPU. Batch-level loops are data-parallel
//! via rayon (feature `parallel`, on by default) with order-preserving
//! reductions, so results are bitwise identical to the sequential fallback.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod loss;
pub mod model;
pub mod nn;
pub mod patch;
pub mod region;
pub mod rng;
pub mod roi;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
