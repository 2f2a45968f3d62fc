//! Dual-gated mixture-of-experts adapter for multispectral segmentation.
//!
//! A frozen two-stream backbone produces visual and depth-like tokens. After
//! every backbone block, an adapter routes each token to a few low-rank
//! experts per modality, fuses the two resulting adjustment maps with
//! cross-attention and adds the result back into the visual stream.
//!
//! The crate also ships a small synthetic cross-domain benchmark, an AdamW
//! training loop with exact gradients, and a finite-difference checker.

pub mod adapter;
pub mod backbone;
pub mod balance;
pub mod commands;
pub mod config;
pub mod error;
pub mod experts;
pub mod fusion;
pub mod gradcheck;
pub mod gating;
pub mod losses;
pub mod manifest;
pub mod optim;
pub mod par;
pub mod rng;
pub mod smtx;
pub mod synthbench;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Norm, Tensor};
