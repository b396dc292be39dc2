//! Reasoning-aware demonstration retrieval for cross-domain log anomaly detection.
//!
//! Source-domain and target-domain log sequences are embedded with a frozen
//! backbone plus a trainable projection head. An LLM oracle scores how much
//! each candidate demonstration helps, the head is trained to align domains
//! and pull helpful demonstrations closer, and detection prompts mix
//! similarity neighbours with demonstrations that proved useful for them.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod binio;
mod http;

pub mod config;
pub mod corpus;
pub mod delta;
pub mod embed;
pub mod error;
pub mod eval;
pub mod infer;
pub mod oracle;
pub mod pipeline;
pub mod retrieve;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
