//! Early-exit multimodal embedding engine.
//!
//! Items are embedded offline at a predicted exit layer (coarse), batched by
//! exit and streamed layer by layer. A shared LoRA suite heals shallow exits
//! toward the full-depth embedding, and an INT4 activation cache lets a
//! query resume any stored item from its exit to a fine-grained embedding.

pub mod codec;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod exit_oracle;
pub mod healing;
pub mod numerics;
pub mod predictor;
pub mod retrieval;
pub mod scheduler;
pub mod store;
pub mod tracesim;

pub use error::{Error, Result};
