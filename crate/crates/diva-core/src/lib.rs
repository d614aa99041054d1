//! Desk-scale laboratory for dual-flow factorized mutual-reinforcement
//! post-training of a miniature unified multimodal model.
//!
//! The pipeline: synthetic anchor-grounded image-text pairs -> two task flows
//! (captioning and masked reconstruction) through a shared transformer ->
//! shared/unique factor encoders over mid-layer states -> contrastive MI
//! objectives -> two-stage training with diagnostics.

pub mod backbone;
pub mod factorization;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod mat;
pub mod mi;
pub mod real;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
