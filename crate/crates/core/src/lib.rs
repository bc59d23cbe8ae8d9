//! Fine-tuning of a visual embedding head under a spurious-feature alignment
//! constraint.
//!
//! The crate works on precomputed embeddings: image features from a frozen
//! backbone and a (template × class) grid of text features. From the text
//! grid it builds class prototypes and context ("spurious") prototypes,
//! optionally cleans the latter with outlier filtering plus k-means, and
//! trains a small residual adapter with cross-entropy against the class
//! prototypes plus a KL penalty that keeps the adapter's distribution over
//! spurious prototypes close to the frozen encoder's.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`embed_store`]: on-disk embedding archives (`.json` manifest + `.bin` payload)
//! - [`prototypes`]: class / spurious prototype construction
//! - [`spc`]: isolation-forest filtering and k-means merging of spurious prototypes
//! - [`adapter`]: the trainable head, its analytic backward pass and SGD
//! - [`losses`]: class cross-entropy, spurious KL and their weighted sum
//! - [`trainer`]: proxy sampling, the training loop and weight interpolation
//! - [`eval`]: zero-shot and episodic prototypical evaluation
//! - [`synth`]: synthetic class/context dataset generator

pub mod adapter;
pub mod embed_store;
pub mod error;
pub mod eval;
pub mod losses;
pub mod prototypes;
pub mod seed;
pub mod spc;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
