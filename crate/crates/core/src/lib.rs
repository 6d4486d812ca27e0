//! Multi-modal contrastive kinship retrieval.
//!
//! Parent and child face images are encoded by a patch-based residual
//! network, fused with frozen identity (age-invariant) and race features
//! through channel gates, and trained without kin labels by contrasting a
//! momentum key encoder against a FIFO memory bank. Everything runs on the
//! [`dcml_tensor`] engine against a seeded synthetic family dataset.

pub mod ablation;
pub mod batch;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod deaging;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod race;

pub use error::{Error, Result};
