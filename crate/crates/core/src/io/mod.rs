//! File formats: tensor archives, run-length and PNG masks, and the
//! JSON sidecars that travel with token archives.

pub mod archive;
pub mod png;
pub mod rle;

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

pub use archive::{Archive, Tensor};

/// Reads a mask from a PNG file or an RLE JSON file, chosen by extension.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
    {
        Some(e) if e == "json" => rle::from_json(&std::fs::read_to_string(path)?),
        Some(e) if e == "png" => png::read_mask(path),
        _ => Err(Error::format(format!(
            "{}: masks must be .png or .json",
            path.display()
        ))),
    }
}
