//! Object specifications: which masks to tokenize, optionally per video frame.
//!
//! ```json
//! [
//!   {"object_id": "cat", "mask": "cat.png"},
//!   {"object_id": "ball", "mask": {"size": [4, 4], "counts": [5, 2, 9]}},
//!   {"object_id": "dog", "frames": [
//!     {"timestamp": 0.0, "mask": "dog0.png", "image": "frame0.png"},
//!     {"timestamp": 0.5, "mask": "dog1.json", "image": "frame1.png"}
//!   ]}
//! ]
//! ```
//!
//! Relative paths resolve against the directory of the spec file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use refertok::geometry::BinaryMask;
use refertok::io::rle::{self, Rle};
use refertok::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MaskSource {
    /// PNG (nonzero = foreground) or RLE JSON file
    Path(PathBuf),
    Inline(Rle),
}

impl MaskSource {
    pub fn load(&self) -> Result<BinaryMask> {
        match self {
            MaskSource::Path(p) => refertok::io::read_mask(p),
            MaskSource::Inline(r) => rle::decode(r),
        }
    }

    fn rebase(&mut self, dir: &Path) {
        if let MaskSource::Path(p) = self {
            *p = rebase(dir, p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub timestamp: f64,
    pub mask: MaskSource,
    #[serde(default)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub object_id: String,
    #[serde(default)]
    pub mask: Option<MaskSource>,
    #[serde(default)]
    pub frames: Vec<FrameSpec>,
}

/// One unit of work: a single mask of a single object.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub object_id: String,
    pub timestamp: Option<f64>,
    pub mask: MaskSource,
    pub image: Option<PathBuf>,
    /// File-name stem shared by every output of this job.
    pub stem: String,
}

fn rebase(dir: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        dir.join(p)
    } else {
        p.to_path_buf()
    }
}

fn bad(msg: String) -> Error {
    Error::Format(format!("object spec: {msg}"))
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<()> {
        let id = &self.object_id;
        if id.is_empty() || id.starts_with('.') || id.contains(['/', '\\']) {
            return Err(bad(format!("object_id {id:?} is not a plain file name")));
        }
        match (&self.mask, self.frames.is_empty()) {
            (Some(_), false) => {
                return Err(bad(format!("{id}: give either mask or frames, not both")))
            }
            (None, true) => return Err(bad(format!("{id}: needs a mask or at least one frame"))),
            _ => {}
        }
        for f in &self.frames {
            if !f.timestamp.is_finite() || f.timestamp < 0.0 {
                return Err(bad(format!(
                    "{id}: timestamp {} is not a non-negative number",
                    f.timestamp
                )));
            }
        }
        if let Some(w) = self
            .frames
            .windows(2)
            .find(|w| w[1].timestamp <= w[0].timestamp)
        {
            return Err(bad(format!(
                "{id}: frame timestamps must increase strictly ({} then {})",
                w[0].timestamp, w[1].timestamp
            )));
        }
        Ok(())
    }

    pub fn jobs(&self) -> Vec<Job> {
        match &self.mask {
            Some(m) => vec![Job {
                object_id: self.object_id.clone(),
                timestamp: None,
                mask: m.clone(),
                image: None,
                stem: self.object_id.clone(),
            }],
            None => self
                .frames
                .iter()
                .enumerate()
                .map(|(i, f)| Job {
                    object_id: self.object_id.clone(),
                    timestamp: Some(f.timestamp),
                    mask: f.mask.clone(),
                    image: f.image.clone(),
                    stem: format!("{}.f{i:03}", self.object_id),
                })
                .collect(),
        }
    }
}

pub fn parse(text: &str, base: &Path) -> Result<Vec<ObjectSpec>> {
    let mut specs: Vec<ObjectSpec> = serde_json::from_str(text)?;
    if specs.is_empty() {
        return Err(bad("no objects".into()));
    }
    let mut seen = HashSet::new();
    for s in &mut specs {
        s.validate()?;
        if !seen.insert(s.object_id.clone()) {
            return Err(bad(format!("duplicate object_id {:?}", s.object_id)));
        }
        if let Some(m) = s.mask.as_mut() {
            m.rebase(base);
        }
        for f in &mut s.frames {
            f.mask.rebase(base);
            if let Some(img) = f.image.as_mut() {
                *img = rebase(base, img);
            }
        }
    }
    Ok(specs)
}

pub fn load(path: &Path) -> Result<Vec<ObjectSpec>> {
    let text = std::fs::read_to_string(path)?;
    parse(&text, path.parent().unwrap_or(Path::new("")))
}

/// Every job of every object, objects in file order, frames in time order.
pub fn load_jobs(path: &Path) -> Result<Vec<Job>> {
    Ok(load(path)?.iter().flat_map(ObjectSpec::jobs).collect())
}
