pub mod assemble;
pub mod budget;
pub mod infuse;
pub mod simstats;
pub mod tokenize;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use refertok::geometry::ImageBuffer;
use refertok::io::png::read_image;
use refertok::{Error, Result};

use crate::objects::Job;

/// Loads every distinct image the jobs need, once, in sorted path order.
pub(crate) fn load_images(
    jobs: &[Job],
    default: Option<&Path>,
) -> Result<BTreeMap<PathBuf, ImageBuffer>> {
    let mut images = BTreeMap::new();
    for job in jobs {
        let path = image_for(job, default)?;
        if !images.contains_key(path) {
            images.insert(path.to_path_buf(), read_image(path)?);
        }
    }
    Ok(images)
}

pub(crate) fn image_for<'a>(job: &'a Job, default: Option<&'a Path>) -> Result<&'a Path> {
    job.image.as_deref().or(default).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "{}: no image given (use --image or a per-frame image)",
            job.stem
        ))
    })
}
