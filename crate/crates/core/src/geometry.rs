//! Mask and box arithmetic plus the dynamic object processing step:
//! area-driven scale selection, resampling, contextual padding and cropping.
//!
//! Coordinates: `x` indexes columns, `y` indexes rows, origin top-left.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Per-pixel foreground indicator, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "mask must be at least 1x1, got {width}x{height}"
            )));
        }
        if bits.len() != width * height {
            return Err(Error::dims(format!(
                "mask {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width && self.bottom() <= height
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.right() >= other.right()
            && self.bottom() >= other.bottom()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleRegime {
    Upscale,
    Downscale,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePlan {
    pub s: f64,
    pub regime: ScaleRegime,
    /// Target area in patches: `n` when upscaling, 100 when downscaling.
    pub target_area_tokens: Option<u32>,
}

impl ScalePlan {
    pub fn identity() -> Self {
        Self {
            s: 1.0,
            regime: ScaleRegime::Identity,
            target_area_tokens: None,
        }
    }
}

/// Interleaved (HWC) image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "image must have positive dims, got {width}x{height}x{channels}"
            )));
        }
        if values.len() != width * height * channels {
            return Err(Error::dims(format!(
                "image {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![0.0; width * height * channels],
        )
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    values.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.values[i..i + self.channels]
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * a).collect(),
            ..self.clone()
        }
    }
}

pub fn mask_area(mask: &BinaryMask) -> usize {
    mask.bits.iter().filter(|&&b| b).count()
}

pub fn bounding_box(mask: &BinaryMask) -> Result<BoundingBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        let row = &mask.bits[y * mask.width..(y + 1) * mask.width];
        let Some(first) = row.iter().position(|&b| b) else {
            continue;
        };
        let last = row.iter().rposition(|&b| b).unwrap_or(first);
        x0 = x0.min(first);
        x1 = x1.max(last);
        y0 = y0.min(y);
        y1 = y;
    }
    if x0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

/// Picks the scale that pulls a region's pixel area toward `[n·Ω, 100·Ω]`.
/// Boundaries are strict: an area exactly on a threshold keeps `s = 1`.
pub fn scale_ratio(area: u64, patch_area: u64, n: u32) -> Result<ScalePlan> {
    if n == 0 || n >= 100 {
        return Err(Error::InvalidConfig(format!(
            "token count n must be in 1..100 so the scale thresholds do not cross, got {n}"
        )));
    }
    if patch_area == 0 {
        return Err(Error::InvalidConfig("patch area must be positive".into()));
    }
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    let hi = 100 * patch_area;
    let lo = n as u64 * patch_area;
    let plan = if area > hi {
        ScalePlan {
            s: (hi as f64 / area as f64).sqrt(),
            regime: ScaleRegime::Downscale,
            target_area_tokens: Some(100),
        }
    } else if area < lo {
        ScalePlan {
            s: (lo as f64 / area as f64).sqrt(),
            regime: ScaleRegime::Upscale,
            target_area_tokens: Some(n),
        }
    } else {
        ScalePlan::identity()
    };
    Ok(plan)
}

pub fn scaled_dims(width: usize, height: usize, s: f64) -> (usize, usize) {
    let w = ((width as f64 * s).round() as usize).max(1);
    let h = ((height as f64 * s).round() as usize).max(1);
    (w, h)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &ImageBuffer, out_w: usize, out_h: usize) -> ImageBuffer {
    if out_w == image.width && out_h == image.height {
        return image.clone();
    }
    let sx = image.width as f64 / out_w.max(1) as f64;
    let sy = image.height as f64 / out_h.max(1) as f64;
    bilinear(
        image,
        out_w,
        out_h,
        |x| (x as f64 + 0.5) * sx,
        |y| (y as f64 + 0.5) * sy,
    )
}

/// `src_x(dst)` / `src_y(dst)` give the source coordinate of a destination pixel center.
fn bilinear(
    image: &ImageBuffer,
    out_w: usize,
    out_h: usize,
    src_x: impl Fn(usize) -> f64,
    src_y: impl Fn(usize) -> f64 + Sync + Send,
) -> ImageBuffer {
    let (in_w, in_h, ch) = (image.width, image.height, image.channels);
    let out_w = out_w.max(1);
    let out_h = out_h.max(1);
    let sample = |center: f64, len: usize| -> (usize, usize, f64) {
        let src = (center - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| sample(src_x(x), in_w)).collect();
    let mut values = vec![0.0; out_w * out_h * ch];
    par::for_each_chunk_mut(&mut values, out_w * ch, |y, row| {
        let (y0, y1, fy) = sample(src_y(y), in_h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..ch {
                let top = image.get(x0, y0, c) * (1.0 - fx) + image.get(x1, y0, c) * fx;
                let bot = image.get(x0, y1, c) * (1.0 - fx) + image.get(x1, y1, c) * fx;
                row[x * ch + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    ImageBuffer {
        width: out_w,
        height: out_h,
        channels: ch,
        values,
    }
}

/// Nearest-neighbor resize; output stays binary.
pub fn resize_mask_nearest(mask: &BinaryMask, out_w: usize, out_h: usize) -> BinaryMask {
    let (out_w, out_h) = (out_w.max(1), out_h.max(1));
    let (in_w, in_h) = (mask.width as f64, mask.height as f64);
    nearest(
        mask,
        out_w,
        out_h,
        |x| (x as f64 + 0.5) * in_w / out_w as f64,
        |y| (y as f64 + 0.5) * in_h / out_h as f64,
    )
}

fn nearest(
    mask: &BinaryMask,
    out_w: usize,
    out_h: usize,
    src_x: impl Fn(usize) -> f64,
    src_y: impl Fn(usize) -> f64,
) -> BinaryMask {
    let pick = |center: f64, len: usize| (center.floor() as usize).min(len - 1);
    let xs: Vec<usize> = (0..out_w).map(|x| pick(src_x(x), mask.width)).collect();
    let mut bits = vec![false; out_w * out_h];
    for y in 0..out_h {
        let sy = pick(src_y(y), mask.height);
        for (x, &sx) in xs.iter().enumerate() {
            bits[y * out_w + x] = mask.get(sx, sy);
        }
    }
    BinaryMask {
        width: out_w,
        height: out_h,
        bits,
    }
}

/// Resamples image (bilinear) and mask (nearest) by the plan's scale factor.
///
/// Output dims are `round(dim·s)`; pixel centers map back through `1/s` itself.
pub fn resample_region(
    image: &ImageBuffer,
    mask: &BinaryMask,
    plan: &ScalePlan,
) -> Result<(ImageBuffer, BinaryMask)> {
    if image.width != mask.width || image.height != mask.height {
        return Err(Error::dims(format!(
            "image {}x{} and mask {}x{} differ",
            image.width, image.height, mask.width, mask.height
        )));
    }
    if plan.regime == ScaleRegime::Identity || plan.s == 1.0 {
        return Ok((image.clone(), mask.clone()));
    }
    // sample at the exact factor so the mask area tracks s²·area, not the rounded dims
    let (w, h) = scaled_dims(image.width, image.height, plan.s);
    let s = plan.s;
    let at = move |d: usize| (d as f64 + 0.5) / s;
    Ok((bilinear(image, w, h, at, at), nearest(mask, w, h, at, at)))
}

/// Grows `bbox` about its center by `beta` and clips to the image.
pub fn contextual_pad(bbox: &BoundingBox, img_w: usize, img_h: usize, beta: f64) -> BoundingBox {
    let beta = if beta.is_finite() { beta.max(1.0) } else { 1.0 };
    let expand = |start: usize, len: usize, limit: usize| -> (usize, usize) {
        let center = start as f64 + len as f64 / 2.0;
        let half = len as f64 * beta / 2.0;
        let lo = (center - half + 1e-9).floor().max(0.0) as usize;
        let hi = ((center + half - 1e-9).ceil() as usize).min(limit);
        let lo = lo.min(start);
        let hi = hi.max((start + len).min(limit));
        (lo, hi)
    };
    let (x0, x1) = expand(bbox.x, bbox.w, img_w);
    let (y0, y1) = expand(bbox.y, bbox.h, img_h);
    BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
}

fn check_box(bbox: &BoundingBox, width: usize, height: usize) -> Result<()> {
    if !bbox.fits_in(width, height) {
        return Err(Error::OutOfBounds(format!(
            "box ({}, {}, {}, {}) does not fit in {width}x{height}",
            bbox.x, bbox.y, bbox.w, bbox.h
        )));
    }
    Ok(())
}

pub fn crop(image: &ImageBuffer, bbox: &BoundingBox) -> Result<ImageBuffer> {
    check_box(bbox, image.width, image.height)?;
    let ch = image.channels;
    let mut values = Vec::with_capacity(bbox.w * bbox.h * ch);
    for y in bbox.y..bbox.bottom() {
        let start = (y * image.width + bbox.x) * ch;
        values.extend_from_slice(&image.values[start..start + bbox.w * ch]);
    }
    ImageBuffer::new(bbox.w, bbox.h, ch, values)
}

pub fn crop_mask(mask: &BinaryMask, bbox: &BoundingBox) -> Result<BinaryMask> {
    check_box(bbox, mask.width, mask.height)?;
    let mut bits = Vec::with_capacity(bbox.w * bbox.h);
    for y in bbox.y..bbox.bottom() {
        let start = y * mask.width + bbox.x;
        bits.extend_from_slice(&mask.bits[start..start + bbox.w]);
    }
    BinaryMask::new(bbox.w, bbox.h, bits)
}
