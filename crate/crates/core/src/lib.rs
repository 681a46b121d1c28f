//! Hierarchical LoRA federated-learning simulation engine.
//!
//! Clients share a frozen base model and learn three tiers of low-rank
//! adapters along a root → cluster → leaf path:
//!
//! - [`federation`] trains the tiers in a cascade with progressive freezing,
//!   product-space aggregation and SVD refactorization,
//! - [`clustering`] discovers client groups from the subspaces spanned by
//!   their root-stage `B` factors,
//! - [`adaptation`] routes held-out clients to a cluster and fine-tunes a
//!   fresh leaf for them,
//! - [`eval`] computes personalization metrics and tier diagnostics.
//!
//! Everything numeric runs on the dense, deterministic [`numerics::Matrix`].

pub mod adaptation;
pub mod clustering;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod federation;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::Matrix;
