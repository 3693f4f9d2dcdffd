//! Object-token machinery for region-level multimodal models.
//!
//! - [`geometry`]: masks, boxes, scale selection, resampling, cropping
//! - [`encoder`]: vision-encoder trait, linear stub encoder, token-grid masks
//! - [`tokenizer`]: scale-adaptive object tokenizer (mask → `n` tokens)
//! - [`infusion`]: local/global cross-attention infusion and sequence layouts
//! - [`budget`]: analytical FLOPs for vision-object vs object-only inputs
//! - [`analysis`]: pairwise cosine-similarity diagnostics
//! - [`io`]: tensor archives, RLE/PNG masks
//!
//! Inner loops run on rayon when the `parallel` feature is enabled; results
//! are identical for any worker count.

pub mod analysis;
pub mod budget;
pub mod config;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod infusion;
pub mod io;
pub mod par;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, ErrorClass, Result};
