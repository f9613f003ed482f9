//! Bundle completion: rank catalog items by how well they complete a partial
//! bundle of seed items.
//!
//! Items are represented by fusing three feature sources (multimodal content,
//! collaborative-filtering embeddings, learnable id embeddings) with a
//! feature-level self-attention encoder; a second, item-level self-attention
//! encoder turns a set of seed items into a bundle representation. Training
//! combines a softmax likelihood over the catalog with item- and bundle-level
//! contrastive losses.

pub mod bundle_encoder;
pub mod cf;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod item_encoder;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use config::RunConfig;
pub use error::ModelError;
pub use model::{Checkpoint, Model};
