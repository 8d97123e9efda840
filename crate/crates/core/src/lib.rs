//! Adversarial watermarking of contrastive-learning encoders.
//!
//! The pipeline has three phases: pre-train an encoder with a contrastive
//! objective ([`contrastive`]), generate an ℓ∞-bounded adversarial perturbation
//! anchored on a secret key image and embed it into the encoder
//! ([`watermark`]), then check ownership of a suspicious encoder or
//! downstream classifier ([`verification`]). [`attacks`] implements the usual
//! removal attempts (fine-tuning, retraining, pruning).

mod codec;
pub mod attacks;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod models;
pub mod numcore;
pub mod pipeline;
pub mod rng;
pub mod verification;
pub mod watermark;

pub use error::{Error, FormatError, Result};
