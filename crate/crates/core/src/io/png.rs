//! PNG ingestion for images and masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, ImageBuffer};

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::format(format!("{}: {other}", path.display())),
    })
}

/// Loads an 8-bit mask; any nonzero luma value is foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = open(path.as_ref())?.into_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::new(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|v| v != 0).collect(),
    )
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let raw: Vec<u8> = mask
        .bits()
        .iter()
        .map(|&b| if b { 255 } else { 0 })
        .collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .ok_or_else(|| Error::format("mask buffer size"))?;
    img.save(path.as_ref())
        .map_err(|e| Error::format(e.to_string()))
}

/// Loads an RGB image with intensities scaled to `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let img = open(path.as_ref())?.into_rgb8();
    let (w, h) = img.dimensions();
    let values = img
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / 255.0)
        .collect();
    ImageBuffer::new(w as usize, h as usize, 3, values)
}

pub fn write_image(path: impl AsRef<Path>, image: &ImageBuffer) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::format("only RGB images can be written"));
    }
    let raw: Vec<u8> = image
        .values()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, raw)
        .ok_or_else(|| Error::format("image buffer size"))?;
    img.save(path.as_ref())
        .map_err(|e| Error::format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = BinaryMask::from_fn(5, 3, |x, y| (x + y) % 3 == 0).unwrap();
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn image_png_round_trip_on_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img =
            ImageBuffer::from_fn(4, 2, 3, |x, y, c| ((x * 40 + y * 7 + c) as f64) / 255.0).unwrap();
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        assert!(img
            .values()
            .iter()
            .zip(back.values())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn missing_file_is_io_and_garbage_is_format() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_mask(dir.path().join("nope.png")),
            Err(Error::Io(_))
        ));
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(read_mask(&p), Err(Error::Format(_))));
    }
}
