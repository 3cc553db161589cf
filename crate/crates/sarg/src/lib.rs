//! Style-aligned autoregressive text-to-image generation at desk scale.
//!
//! A procedural image domain (known style and content ground truth) feeds a
//! patch-VQ tokenizer and a small decoder-only transformer. Style comes in
//! through a frozen conv encoder plus a trainable perceiver resampler whose
//! output is substituted at placeholder positions; training uses binary
//! (prompt, image) pairs with stylized/raw mixing, LoRA adaptation, noise
//! injection, style-enhanced inference, and DPO post-training. The eval
//! module measures prompt adherence, style consistency, and content leakage
//! with an independently trained judge.

pub mod armodel;
pub mod autograd;
pub mod curation;
pub mod dpo;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod procgen;
pub mod resampler;
pub mod rng;
pub mod tokenizer;

pub use error::{Error, Result};
