//! Selective history expansion for conversational search.
//!
//! Historical query turns are labeled by whether appending them to the
//! current query improves retrieval (pseudo relevance labels). Those labels
//! train a turn selector, and jointly fine-tune a toy dual-encoder retriever
//! alongside a per-turn selector head.

pub mod analysis;
pub mod data;
pub mod dense;
pub mod error;
pub mod joint;
pub mod metrics;
pub mod pipeline;
pub mod prl;
pub mod selector;
pub mod sparse;
pub mod synth;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
