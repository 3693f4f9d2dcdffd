//! Scale-adaptive object tokenizer.
//!
//! Turns one object mask into exactly `n` tokens: scale the region toward a
//! fixed patch budget, crop it with context, encode, keep the tokens under
//! the mask, add a projected relative position, merge with k-means and
//! project through a two-layer MLP.

pub mod kmeans;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use kmeans::{aggregate_kmeans, initial_indices, nearest, Aggregation};

use crate::encoder::{grid_mask, FeatureMap, PatchConfig, TokenMask, VisionEncoder};
use crate::error::{Error, Result};
use crate::geometry::{
    bounding_box, contextual_pad, crop, crop_mask, mask_area, resample_region, scale_ratio,
    BinaryMask, BoundingBox, ImageBuffer, ScalePlan,
};
use crate::io::Archive;
use crate::tensor::{Activation, Linear, Tokens};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Tokens per object.
    pub n: usize,
    pub k_iters: usize,
    /// Contextual padding factor for the crop around the object.
    pub beta: f64,
    /// Seed for k-means initialization.
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            n: 32,
            k_iters: 10,
            beta: 1.5,
            seed: 0,
            embed_dim: 64,
            hidden_dim: 128,
            out_dim: 64,
            activation: Activation::Gelu,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n >= 100 {
            return Err(Error::InvalidConfig(format!(
                "n must be in 1..100, got {}",
                self.n
            )));
        }
        if self.k_iters == 0 {
            return Err(Error::InvalidConfig("k_iters must be at least 1".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must be >= 1, got {}",
                self.beta
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidConfig(
                "tokenizer dims must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Relative `(p0, p1)` coordinates for every pixel of an expanded region.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalGrid {
    pub width: usize,
    pub height: usize,
    entries: Vec<[f64; 2]>,
}

impl PositionalGrid {
    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        self.entries[i * self.width + j]
    }

    pub fn entries(&self) -> &[[f64; 2]] {
        &self.entries
    }

    /// Samples the grid at the pixel under each token cell's center.
    pub fn sample_cells(&self, cells: &[(usize, usize)], patch: &PatchConfig) -> Vec<[f64; 2]> {
        cells
            .iter()
            .map(|&(gi, gj)| {
                let i = ((gi * patch.patch_h) as f64 + patch.patch_h as f64 / 2.0).floor() as usize;
                let j = ((gj * patch.patch_w) as f64 + patch.patch_w as f64 / 2.0).floor() as usize;
                self.at(i.min(self.height - 1), j.min(self.width - 1))
            })
            .collect()
    }
}

/// Relative position of pixel `(i, j)` of the expanded region:
/// `p0 = ((j / exp_w)·w_b + x_b) / (W − 1)`, `p1 = ((i / exp_h)·h_b + y_b) / (H − 1)`,
/// clamped to `[0, 1]`.
pub fn relative_position(
    bbox: &BoundingBox,
    exp_w: usize,
    exp_h: usize,
    img_w: usize,
    img_h: usize,
    i: usize,
    j: usize,
) -> [f64; 2] {
    let p0 = ((j as f64 / exp_w as f64) * bbox.w as f64 + bbox.x as f64) / (img_w - 1) as f64;
    let p1 = ((i as f64 / exp_h as f64) * bbox.h as f64 + bbox.y as f64) / (img_h - 1) as f64;
    [p0.clamp(0.0, 1.0), p1.clamp(0.0, 1.0)]
}

pub fn positional_grid(
    bbox: &BoundingBox,
    exp_w: usize,
    exp_h: usize,
    img_w: usize,
    img_h: usize,
) -> Result<PositionalGrid> {
    if img_w < 2 || img_h < 2 {
        return Err(Error::DegenerateImage {
            width: img_w,
            height: img_h,
        });
    }
    if exp_w == 0 || exp_h == 0 {
        return Err(Error::InvalidConfig(
            "expanded region must be at least 1x1".into(),
        ));
    }
    let mut entries = Vec::with_capacity(exp_w * exp_h);
    for i in 0..exp_h {
        for j in 0..exp_w {
            entries.push(relative_position(bbox, exp_w, exp_h, img_w, img_h, i, j));
        }
    }
    Ok(PositionalGrid {
        width: exp_w,
        height: exp_h,
        entries,
    })
}

/// Learned pieces of the tokenizer: the positional projection and the output MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub pos_linear: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl ProjectionWeights {
    pub fn new(
        pos_linear: Linear,
        fc1: Linear,
        fc2: Linear,
        activation: Activation,
    ) -> Result<Self> {
        let w = Self {
            pos_linear,
            fc1,
            fc2,
            activation,
        };
        w.validate()?;
        Ok(w)
    }

    fn validate(&self) -> Result<()> {
        if self.pos_linear.in_dim != 2 {
            return Err(Error::dims(format!(
                "positional projection takes 2 inputs, got {}",
                self.pos_linear.in_dim
            )));
        }
        if self.pos_linear.out_dim != self.fc1.in_dim || self.fc1.out_dim != self.fc2.in_dim {
            return Err(Error::dims(format!(
                "projection shapes do not chain: pos 2->{}, fc1 {}->{}, fc2 {}->{}",
                self.pos_linear.out_dim,
                self.fc1.in_dim,
                self.fc1.out_dim,
                self.fc2.in_dim,
                self.fc2.out_dim
            )));
        }
        Ok(())
    }

    pub fn seeded(cfg: &TokenizerConfig, seed: u64) -> Self {
        Self {
            pos_linear: Linear::seeded(2, cfg.embed_dim, seed, true),
            fc1: Linear::seeded(cfg.embed_dim, cfg.hidden_dim, seed.wrapping_add(1), true),
            fc2: Linear::seeded(cfg.hidden_dim, cfg.out_dim, seed.wrapping_add(2), true),
            activation: cfg.activation,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for (name, l) in [
            ("pos_linear", &self.pos_linear),
            ("mlp.fc1", &self.fc1),
            ("mlp.fc2", &self.fc2),
        ] {
            a.push_f64(&format!("{name}.weight"), &[l.out_dim, l.in_dim], &l.weight)?;
            a.push_f64(&format!("{name}.bias"), &[l.out_dim], &l.bias)?;
        }
        Ok(a)
    }

    pub fn from_archive(archive: &Archive, activation: Activation) -> Result<Self> {
        let linear = |name: &str| -> Result<Linear> {
            let w = archive.require(&format!("{name}.weight"))?;
            let b = archive.require(&format!("{name}.bias"))?;
            let [out_dim, in_dim] = w.shape[..] else {
                return Err(Error::format(format!("{name}.weight must be 2-D")));
            };
            Linear::new(in_dim, out_dim, w.to_f64(), b.to_f64())
                .map_err(|e| Error::format(e.to_string()))
        };
        Self::new(
            linear("pos_linear")?,
            linear("mlp.fc1")?,
            linear("mlp.fc2")?,
            activation,
        )
    }
}

/// Foreground token embeddings with their `(row, col)` grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedFeatures {
    pub cells: Vec<(usize, usize)>,
    pub tokens: Tokens,
}

pub fn extract_masked_features(fr: &FeatureMap, tmask: &TokenMask) -> Result<MaskedFeatures> {
    if fr.grid_h != tmask.grid_h || fr.grid_w != tmask.grid_w {
        return Err(Error::dims(format!(
            "token mask {}x{} does not match feature grid {}x{}",
            tmask.grid_h, tmask.grid_w, fr.grid_h, fr.grid_w
        )));
    }
    let cells: Vec<(usize, usize)> = (0..fr.grid_h)
        .flat_map(|i| (0..fr.grid_w).map(move |j| (i, j)))
        .filter(|&(i, j)| tmask.get(i, j))
        .collect();
    if cells.is_empty() {
        return Err(Error::EmptyMask);
    }
    let idx: Vec<usize> = cells.iter().map(|&(i, j)| i * fr.grid_w + j).collect();
    Ok(MaskedFeatures {
        tokens: fr.tokens.select(&idx),
        cells,
    })
}

/// `out_t = f_t + pos_linear(p_t)` for every foreground token.
pub fn fuse_position(
    features: &Tokens,
    positions: &[[f64; 2]],
    w: &ProjectionWeights,
) -> Result<Tokens> {
    if positions.len() != features.len() {
        return Err(Error::dims(format!(
            "{} positions for {} masked tokens",
            positions.len(),
            features.len()
        )));
    }
    if features.dim() != w.pos_linear.out_dim {
        return Err(Error::dims(format!(
            "feature width {} != positional projection width {}",
            features.dim(),
            w.pos_linear.out_dim
        )));
    }
    let mut out = features.clone();
    for (t, p) in positions.iter().enumerate() {
        let pe = w.pos_linear.apply(p);
        for (o, v) in out.row_mut(t).iter_mut().zip(pe) {
            *o += v;
        }
    }
    Ok(out)
}

/// `out = fc2(σ(fc1(t)))` per token.
pub fn project_mlp(tokens: &Tokens, w: &ProjectionWeights) -> Result<Tokens> {
    if tokens.dim() != w.fc1.in_dim {
        return Err(Error::dims(format!(
            "token width {} != MLP input {}",
            tokens.dim(),
            w.fc1.in_dim
        )));
    }
    let act = w.activation;
    Ok(tokens.map_rows(w.fc2.out_dim, |row, dst| {
        let mut hidden = w.fc1.apply(row);
        hidden.iter_mut().for_each(|h| *h = act.apply(*h));
        w.fc2.apply_into(&hidden, dst);
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pre_aggregation_count: usize,
    pub padded: bool,
    pub scale_plan: ScalePlan,
}

/// The `n` final tokens of one object at one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTokenSet {
    pub object_id: String,
    pub timestamp: Option<f64>,
    pub tokens: Tokens,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub s: f64,
    pub regime: crate::geometry::ScaleRegime,
}

/// JSON sidecar written next to a token archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSidecar {
    pub object_id: String,
    pub timestamp: Option<f64>,
    pub n: usize,
    pub padded: bool,
    pub pre_aggregation_count: usize,
    pub scale: ScaleSummary,
}

/// `foo.rtk` -> `foo.json`
pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

impl ObjectTokenSet {
    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    pub fn sidecar(&self) -> TokenSidecar {
        TokenSidecar {
            object_id: self.object_id.clone(),
            timestamp: self.timestamp,
            n: self.n(),
            padded: self.provenance.padded,
            pre_aggregation_count: self.provenance.pre_aggregation_count,
            scale: ScaleSummary {
                s: self.provenance.scale_plan.s,
                regime: self.provenance.scale_plan.regime,
            },
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.push_f64(
            "tokens",
            &[self.n(), self.tokens.dim()],
            self.tokens.as_slice(),
        )?;
        Ok(a)
    }

    /// Writes `<path>` (archive) and its `.json` sidecar.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_archive()?.write(path)?;
        let mut json = serde_json::to_string_pretty(&self.sidecar())?;
        json.push('\n');
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let tokens = read_tokens(&Archive::read(path)?)?;
        let side: TokenSidecar =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        if side.n != tokens.len() {
            return Err(Error::format(format!(
                "sidecar says n = {}, archive holds {}",
                side.n,
                tokens.len()
            )));
        }
        let target = match side.scale.regime {
            crate::geometry::ScaleRegime::Upscale => Some(side.n as u32),
            crate::geometry::ScaleRegime::Downscale => Some(100),
            crate::geometry::ScaleRegime::Identity => None,
        };
        Ok(Self {
            object_id: side.object_id,
            timestamp: side.timestamp,
            tokens,
            provenance: Provenance {
                pre_aggregation_count: side.pre_aggregation_count,
                padded: side.padded,
                scale_plan: ScalePlan {
                    s: side.scale.s,
                    regime: side.scale.regime,
                    target_area_tokens: target,
                },
            },
        })
    }
}

/// Reads the 2-D `tokens` tensor of an archive.
pub fn read_tokens(archive: &Archive) -> Result<Tokens> {
    let t = archive.require("tokens")?;
    let [rows, dim] = t.shape[..] else {
        return Err(Error::format(format!(
            "tokens tensor must be 2-D, got {:?}",
            t.shape
        )));
    };
    if dim == 0 || rows == 0 {
        return Err(Error::format("tokens tensor is empty"));
    }
    Tokens::from_flat(dim, t.to_f64())
}

/// Intermediate values of one tokenizer run.
#[derive(Debug, Clone)]
pub struct TokenizerTrace {
    pub plan: ScalePlan,
    pub scaled_size: (usize, usize),
    pub bbox: BoundingBox,
    pub padded_box: BoundingBox,
    pub masked: MaskedFeatures,
    pub positions: Vec<[f64; 2]>,
    pub fused: Tokens,
    pub aggregation: Aggregation,
    pub output: ObjectTokenSet,
}

pub fn tokenize_object(
    image: &ImageBuffer,
    mask: &BinaryMask,
    cfg: &TokenizerConfig,
    weights: &ProjectionWeights,
    encoder: &dyn VisionEncoder,
    object_id: &str,
) -> Result<ObjectTokenSet> {
    tokenize_object_traced(image, mask, cfg, weights, encoder, object_id).map(|t| t.output)
}

pub fn tokenize_object_traced(
    image: &ImageBuffer,
    mask: &BinaryMask,
    cfg: &TokenizerConfig,
    weights: &ProjectionWeights,
    encoder: &dyn VisionEncoder,
    object_id: &str,
) -> Result<TokenizerTrace> {
    cfg.validate()?;
    let patch = encoder.patch();
    if patch.embed_dim != weights.embed_dim() {
        return Err(Error::dims(format!(
            "encoder width {} != projection input {}",
            patch.embed_dim,
            weights.embed_dim()
        )));
    }
    let area = mask_area(mask);
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    let plan = scale_ratio(area as u64, patch.area(), cfg.n as u32)?;
    let (scaled_img, scaled_mask) = resample_region(image, mask, &plan)?;
    let (img_w, img_h) = (scaled_img.width(), scaled_img.height());
    let bbox = bounding_box(&scaled_mask)?;
    let padded_box = contextual_pad(&bbox, img_w, img_h, cfg.beta);
    let region = crop(&scaled_img, &padded_box)?;
    let region_mask = crop_mask(&scaled_mask, &padded_box)?;

    let fr = encoder.encode(&region)?;
    let tmask = grid_mask(&region_mask, patch)?;
    let masked = extract_masked_features(&fr, &tmask)?;
    // box coordinates relative to the image the region was cut from
    let grid = positional_grid(&bbox, padded_box.w, padded_box.h, img_w, img_h)?;
    let positions = grid.sample_cells(&masked.cells, patch);
    let fused = fuse_position(&masked.tokens, &positions, weights)?;
    let aggregation = aggregate_kmeans(&fused, cfg.n, cfg.k_iters, cfg.seed)?;
    let tokens = project_mlp(&aggregation.centroids, weights)?;
    if !tokens.all_finite() {
        return Err(Error::InvalidConfig(
            "tokenizer produced non-finite values".into(),
        ));
    }

    let output = ObjectTokenSet {
        object_id: object_id.to_string(),
        timestamp: None,
        tokens,
        provenance: Provenance {
            pre_aggregation_count: masked.tokens.len(),
            padded: aggregation.padded,
            scale_plan: plan,
        },
    };
    Ok(TokenizerTrace {
        plan,
        scaled_size: (img_w, img_h),
        bbox,
        padded_box,
        masked,
        positions,
        fused,
        aggregation,
        output,
    })
}
