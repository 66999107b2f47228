//! Desk-scale joint contrastive and masked-diffusion training.
//!
//! A vision encoder sees only the unmasked tokens of a latent grid (plus a
//! few learnable buffer tokens). Its pooled output is aligned with a caption
//! tower through a symmetric InfoNCE loss, while a text-conditioned decoder
//! and a small per-token diffusion head learn to denoise the masked tokens.
//! The masking ratio follows a warmup schedule so that alignment is learned
//! on nearly complete images before generation takes over.
//!
//! Decoding reveals tokens in random order along a cosine schedule, with
//! classifier-free guidance and optional candidate selection scored by the
//! model's own contrastive towers.

pub mod checkpoint;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod losses;
pub mod masking;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod tokenizer;
pub mod training;

pub use error::{DreamError, Result};
