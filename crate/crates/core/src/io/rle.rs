//! COCO-style uncompressed run-length masks.
//!
//! `counts` are column-major run lengths that alternate background and
//! foreground, starting with a (possibly zero-length) background run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn decode(rle: &Rle) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    let total: usize = rle.counts.iter().sum();
    if total != h * w {
        return Err(Error::format(format!(
            "RLE counts sum to {total}, expected {h}x{w} = {}",
            h * w
        )));
    }
    let mut bits = vec![false; h * w];
    let mut pos = 0;
    for (i, &run) in rle.counts.iter().enumerate() {
        if i % 2 == 1 {
            for k in pos..pos + run {
                // column-major index k -> (row k % h, col k / h)
                bits[(k % h) * w + k / h] = true;
            }
        }
        pos += run;
    }
    BinaryMask::new(w, h, bits).map_err(|e| Error::format(e.to_string()))
}

pub fn encode(mask: &BinaryMask) -> Rle {
    let (w, h) = (mask.width(), mask.height());
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0;
    for x in 0..w {
        for y in 0..h {
            let b = mask.get(x, y);
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        size: [h, w],
        counts,
    }
}

pub fn from_json(text: &str) -> Result<BinaryMask> {
    let rle: Rle =
        serde_json::from_str(text).map_err(|e| Error::format(format!("bad RLE JSON: {e}")))?;
    decode(&rle)
}
