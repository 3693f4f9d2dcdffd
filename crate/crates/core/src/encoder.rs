//! Vision-encoder abstraction: a deterministic linear patch-embedding stub,
//! feature-map archives for externally computed embeddings, and the
//! projection of pixel masks onto the token grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, ImageBuffer};
use crate::io::Archive;
use crate::tensor::{Linear, Tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
}

impl PatchConfig {
    pub fn new(patch_h: usize, patch_w: usize, embed_dim: usize) -> Result<Self> {
        let cfg = Self {
            patch_h,
            patch_w,
            embed_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch config must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Pixel area of one patch.
    pub fn area(&self) -> u64 {
        (self.patch_h * self.patch_w) as u64
    }
}

/// Token grid of embeddings, row-major over `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub tokens: Tokens,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, tokens: Tokens) -> Result<Self> {
        if tokens.len() != grid_h * grid_w {
            return Err(Error::dims(format!(
                "{grid_h}x{grid_w} grid needs {} tokens, got {}",
                grid_h * grid_w,
                tokens.len()
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::format("feature map contains non-finite values"));
        }
        Ok(Self {
            grid_h,
            grid_w,
            tokens,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.dim()
    }

    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        self.tokens.row(row * self.grid_w + col)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.push_f64(
            "features",
            &[self.grid_h, self.grid_w, self.embed_dim()],
            self.tokens.as_slice(),
        )?;
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let t = archive.require("features")?;
        let [h, w, d] = t.shape[..] else {
            return Err(Error::format(format!(
                "features tensor must be 3-D, got shape {:?}",
                t.shape
            )));
        };
        if d == 0 {
            return Err(Error::format("features tensor has zero embedding width"));
        }
        Self::new(h, w, Tokens::from_flat(d, t.to_f64())?).map_err(|e| match e {
            Error::DimMismatch(m) => Error::Format(m),
            other => other,
        })
    }
}

/// Writes a feature map as a tensor archive.
pub fn write_feature_map(path: impl AsRef<Path>, fm: &FeatureMap) -> Result<()> {
    fm.to_archive()?.write(path)
}

pub fn load_feature_map(path: impl AsRef<Path>, expected: &PatchConfig) -> Result<FeatureMap> {
    let fm = FeatureMap::from_archive(&Archive::read(path)?)?;
    if fm.embed_dim() != expected.embed_dim {
        return Err(Error::dims(format!(
            "archive embedding width {} != expected {}",
            fm.embed_dim(),
            expected.embed_dim
        )));
    }
    Ok(fm)
}

/// Per-token foreground indicator on the encoder grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub bits: Vec<bool>,
}

impl TokenMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.grid_w + col]
    }
}

/// `(grid_w, grid_h)`: images are implicitly zero-padded to whole patches.
pub fn patch_grid(img_w: usize, img_h: usize, cfg: &PatchConfig) -> (usize, usize) {
    (
        img_w.max(1).div_ceil(cfg.patch_w),
        img_h.max(1).div_ceil(cfg.patch_h),
    )
}

/// A token cell is foreground when any pixel it covers is foreground.
pub fn grid_mask(mask: &BinaryMask, cfg: &PatchConfig) -> Result<TokenMask> {
    let (gw, gh) = patch_grid(mask.width(), mask.height(), cfg);
    let mut bits = vec![false; gw * gh];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                bits[(y / cfg.patch_h) * gw + x / cfg.patch_w] = true;
            }
        }
    }
    if !bits.iter().any(|&b| b) {
        return Err(Error::EmptyMask);
    }
    Ok(TokenMask {
        grid_h: gh,
        grid_w: gw,
        bits,
    })
}

/// Something that turns an image into a token grid.
pub trait VisionEncoder: Sync {
    fn patch(&self) -> &PatchConfig;
    fn encode(&self, image: &ImageBuffer) -> Result<FeatureMap>;
}

/// Linear patch embedding `token = P · flatten(patch)`.
///
/// `P` is `embed_dim × (patch_h·patch_w·channels)`, filled row by row with
/// uniform draws in `[-1/sqrt(fan_in), 1/sqrt(fan_in))` from ChaCha8 seeded
/// with `seed`. Patches are flattened as (row, col, channel); pixels outside
/// the image read as zero.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    cfg: PatchConfig,
    channels: usize,
    projection: Linear,
}

impl StubEncoder {
    pub fn new(cfg: PatchConfig, channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let fan_in = cfg.patch_h * cfg.patch_w * channels;
        Ok(Self {
            cfg,
            channels,
            projection: Linear::seeded(fan_in, cfg.embed_dim, seed, false),
        })
    }

    pub fn rgb(cfg: PatchConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, 3, seed)
    }
}

impl VisionEncoder for StubEncoder {
    fn patch(&self) -> &PatchConfig {
        &self.cfg
    }

    fn encode(&self, image: &ImageBuffer) -> Result<FeatureMap> {
        if image.channels() != self.channels {
            return Err(Error::dims(format!(
                "encoder expects {} channels, image has {}",
                self.channels,
                image.channels()
            )));
        }
        let (gw, gh) = patch_grid(image.width(), image.height(), &self.cfg);
        let (ph, pw, ch) = (self.cfg.patch_h, self.cfg.patch_w, self.channels);
        let flat = crate::par::map_range(gw * gh, |cell| {
            let (gy, gx) = (cell / gw, cell % gw);
            let mut patch = vec![0.0; ph * pw * ch];
            for py in 0..ph {
                let y = gy * ph + py;
                if y >= image.height() {
                    break;
                }
                for px in 0..pw {
                    let x = gx * pw + px;
                    if x >= image.width() {
                        break;
                    }
                    let off = (py * pw + px) * ch;
                    patch[off..off + ch].copy_from_slice(image.pixel(x, y));
                }
            }
            self.projection.apply(&patch)
        });
        FeatureMap::new(
            gh,
            gw,
            Tokens::from_flat(self.cfg.embed_dim, flat.concat())?,
        )
    }
}

/// One-shot stub encoding; builds the projection from `seed` on each call.
pub fn encode_stub(image: &ImageBuffer, cfg: &PatchConfig, seed: u64) -> Result<FeatureMap> {
    StubEncoder::new(*cfg, image.channels(), seed)?.encode(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p14(d: usize) -> PatchConfig {
        PatchConfig::new(14, 14, d).unwrap()
    }

    #[test]
    fn patch_grid_examples() {
        assert_eq!(patch_grid(28, 28, &p14(8)), (2, 2));
        assert_eq!(patch_grid(1, 1, &p14(8)), (1, 1));
        assert_eq!(patch_grid(30, 28, &p14(8)), (3, 2));
    }

    #[test]
    fn stub_examples() {
        let cfg = p14(8);
        let zero = ImageBuffer::zeros(28, 28, 3).unwrap();
        let fm = encode_stub(&zero, &cfg, 1).unwrap();
        assert_eq!((fm.grid_h, fm.grid_w, fm.embed_dim()), (2, 2, 8));
        assert!(fm.tokens.as_slice().iter().all(|&v| v == 0.0));

        // same texture in every patch
        let tiled = ImageBuffer::from_fn(28, 28, 3, |x, y, c| {
            ((x % 14) * 3 + (y % 14) + c) as f64 / 60.0
        })
        .unwrap();
        let fm = encode_stub(&tiled, &cfg, 5).unwrap();
        for i in 1..4 {
            assert_eq!(fm.tokens.row(i), fm.tokens.row(0));
        }
        let again = encode_stub(&tiled, &cfg, 5).unwrap();
        let bits = |f: &FeatureMap| {
            f.tokens
                .as_slice()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&fm), bits(&again));
        assert_ne!(bits(&fm), bits(&encode_stub(&tiled, &cfg, 6).unwrap()));
    }

    #[test]
    fn partial_patches_are_zero_padded() {
        let cfg = PatchConfig::new(2, 2, 4).unwrap();
        let img = ImageBuffer::from_fn(3, 1, 3, |_, _, _| 1.0).unwrap();
        let fm = encode_stub(&img, &cfg, 3).unwrap();
        // right cell sees one lit pixel at patch position (0,0)
        let padded =
            ImageBuffer::from_fn(4, 2, 3, |x, y, _| if x < 3 && y < 1 { 1.0 } else { 0.0 })
                .unwrap();
        assert_eq!(fm, encode_stub(&padded, &cfg, 3).unwrap());
    }

    #[test]
    fn grid_mask_examples() {
        let cfg = p14(8);
        let full = BinaryMask::from_fn(28, 28, |_, _| true).unwrap();
        assert_eq!(grid_mask(&full, &cfg).unwrap().bits, vec![true; 4]);

        let mut one = BinaryMask::empty(28, 28).unwrap();
        one.set(0, 0, true);
        assert_eq!(
            grid_mask(&one, &cfg).unwrap().bits,
            vec![true, false, false, false]
        );

        let block = BinaryMask::from_fn(28, 28, |x, y| x < 14 && y < 14).unwrap();
        // enumeration oracle: a cell is set iff some pixel in it is set
        let oracle: Vec<bool> = (0..4)
            .map(|c| {
                let (gy, gx) = (c / 2, c % 2);
                (0..14).any(|py| (0..14).any(|px| block.get(gx * 14 + px, gy * 14 + py)))
            })
            .collect();
        assert_eq!(oracle, vec![true, false, false, false]);
        assert_eq!(grid_mask(&block, &cfg).unwrap().bits, oracle);
        assert!(matches!(
            grid_mask(&BinaryMask::empty(5, 5).unwrap(), &cfg),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn feature_map_archive_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.rtk");
        let tokens = Tokens::from_flat(8, (0..32).map(|i| i as f64 * 0.25).collect()).unwrap();
        let fm = FeatureMap::new(2, 2, tokens).unwrap();
        write_feature_map(&p, &fm).unwrap();
        let cfg = PatchConfig::new(14, 14, 8).unwrap();
        assert_eq!(load_feature_map(&p, &cfg).unwrap(), fm);

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_feature_map(&p, &cfg), Err(Error::Format(_))));

        write_feature_map(&p, &fm).unwrap();
        let wide = PatchConfig::new(14, 14, 16).unwrap();
        assert!(matches!(
            load_feature_map(&p, &wide),
            Err(Error::DimMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn stub_is_linear(a in -3.0f64..3.0, seed in 0u64..50, w in 1usize..30, h in 1usize..30) {
            let cfg = PatchConfig::new(7, 5, 6).unwrap();
            let img = ImageBuffer::from_fn(w, h, 3, |x, y, c| ((x * 31 + y * 17 + c * 7) % 23) as f64 / 23.0).unwrap();
            let base = encode_stub(&img, &cfg, seed).unwrap();
            let scaled = encode_stub(&img.scaled(a), &cfg, seed).unwrap();
            for (u, v) in base.tokens.as_slice().iter().zip(scaled.tokens.as_slice()) {
                prop_assert!((a * u - v).abs() <= 1e-6);
            }
        }

        #[test]
        fn grid_mask_is_monotone(
            bits in proptest::collection::vec(any::<bool>(), 20 * 17),
            extra in proptest::collection::vec(any::<bool>(), 20 * 17),
        ) {
            let cfg = PatchConfig::new(4, 3, 2).unwrap();
            let a = BinaryMask::new(20, 17, bits.clone()).unwrap();
            let union: Vec<bool> = bits.iter().zip(&extra).map(|(x, y)| *x || *y).collect();
            let b = BinaryMask::new(20, 17, union).unwrap();
            if let Ok(ga) = grid_mask(&a, &cfg) {
                let gb = grid_mask(&b, &cfg).unwrap();
                prop_assert!(ga.bits.iter().zip(&gb.bits).all(|(x, y)| !*x || *y));
                prop_assert!(gb.count() >= ga.count());
            }
        }
    }
}
