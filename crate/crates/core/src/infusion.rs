//! Object-centric infusion: two pre-norm cross-attention residual stages
//! that pull local (padded crop) and global (whole image) context into the
//! object tokens, plus the timestamp prefix and LLM input layouts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::VisionEncoder;
use crate::error::{Error, Result};
use crate::geometry::{
    bounding_box, contextual_pad, crop, resize_bilinear, BinaryMask, ImageBuffer,
};
use crate::io::Archive;
use crate::par;
use crate::tensor::{dot, Linear, Tokens};
use crate::tokenizer::{read_tokens, sidecar_path, ObjectTokenSet};

pub const LN_EPS: f64 = 1e-5;

/// Projections and pre-norm affine for one cross-attention stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm_gamma: Vec<f64>,
    pub norm_beta: Vec<f64>,
}

impl AttentionWeights {
    pub fn new(
        heads: usize,
        q: Linear,
        k: Linear,
        v: Linear,
        o: Linear,
        norm_gamma: Vec<f64>,
        norm_beta: Vec<f64>,
    ) -> Result<Self> {
        let w = Self {
            heads,
            q,
            k,
            v,
            o,
            norm_gamma,
            norm_beta,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn dim(&self) -> usize {
        self.q.in_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.k.in_dim
    }

    fn validate(&self) -> Result<()> {
        let d = self.q.in_dim;
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::dims(format!(
                "dim {d} is not divisible by {} heads",
                self.heads
            )));
        }
        let square = |l: &Linear| l.out_dim == d;
        if !(square(&self.q)
            && square(&self.k)
            && square(&self.v)
            && self.o.in_dim == d
            && self.o.out_dim == d)
        {
            return Err(Error::dims(
                "attention projections must all produce the query width".to_string(),
            ));
        }
        if self.k.in_dim != self.v.in_dim {
            return Err(Error::dims(
                "key and value projections read different widths".to_string(),
            ));
        }
        if self.norm_gamma.len() != d || self.norm_beta.len() != d {
            return Err(Error::dims(
                "norm affine must match the query width".to_string(),
            ));
        }
        Ok(())
    }

    /// Seeded weights: query bias drawn, key/value biases only when
    /// `kv_bias`, output bias zero, norm affine identity.
    pub fn seeded(
        dim: usize,
        kv_dim: usize,
        heads: usize,
        seed: u64,
        kv_bias: bool,
    ) -> Result<Self> {
        let s = |k: u64| seed.wrapping_mul(4).wrapping_add(k);
        Self::new(
            heads,
            Linear::seeded(dim, dim, s(0), true),
            Linear::seeded(kv_dim, dim, s(1), kv_bias),
            Linear::seeded(kv_dim, dim, s(2), kv_bias),
            Linear::seeded(dim, dim, s(3), false),
            vec![1.0; dim],
            vec![0.0; dim],
        )
    }

    /// Zeroes the output projection, turning the residual stage into the identity.
    pub fn with_zero_output(mut self) -> Self {
        self.o = Linear::zeros(self.o.in_dim, self.o.out_dim);
        self
    }

    pub fn to_archive(&self) -> Result<(Archive, AttentionManifest)> {
        let mut a = Archive::new();
        let mut projections = BTreeMap::new();
        for (name, l) in [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("o", &self.o),
        ] {
            let weight = format!("{name}.weight");
            let bias = format!("{name}.bias");
            a.push_f64(&weight, &[l.out_dim, l.in_dim], &l.weight)?;
            a.push_f64(&bias, &[l.out_dim], &l.bias)?;
            projections.insert(
                name.to_string(),
                ProjectionRef {
                    weight,
                    bias: Some(bias),
                },
            );
        }
        a.push_f64("norm.gamma", &[self.norm_gamma.len()], &self.norm_gamma)?;
        a.push_f64("norm.beta", &[self.norm_beta.len()], &self.norm_beta)?;
        let manifest = AttentionManifest {
            heads: self.heads,
            projections,
            norm: NormRef {
                gamma: "norm.gamma".into(),
                beta: "norm.beta".into(),
            },
        };
        Ok((a, manifest))
    }

    pub fn from_archive(archive: &Archive, manifest: &AttentionManifest) -> Result<Self> {
        let vector = |name: &str| -> Result<Vec<f64>> {
            let t = archive.require(name)?;
            if t.shape.len() != 1 {
                return Err(Error::format(format!("{name} must be 1-D")));
            }
            Ok(t.to_f64())
        };
        let linear = |key: &str| -> Result<Linear> {
            let r = manifest
                .projections
                .get(key)
                .ok_or_else(|| Error::format(format!("manifest lacks projection {key}")))?;
            let w = archive.require(&r.weight)?;
            let [out_dim, in_dim] = w.shape[..] else {
                return Err(Error::format(format!("{} must be 2-D", r.weight)));
            };
            let bias = match &r.bias {
                Some(b) => vector(b)?,
                None => vec![0.0; out_dim],
            };
            Linear::new(in_dim, out_dim, w.to_f64(), bias).map_err(|e| Error::format(e.to_string()))
        };
        Self::new(
            manifest.heads,
            linear("q")?,
            linear("k")?,
            linear("v")?,
            linear("o")?,
            vector(&manifest.norm.gamma)?,
            vector(&manifest.norm.beta)?,
        )
        .map_err(|e| Error::format(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionRef {
    pub weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormRef {
    pub gamma: String,
    pub beta: String,
}

/// Names the archive tensors that make up an [`AttentionWeights`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionManifest {
    pub heads: usize,
    /// Keys `q`, `k`, `v`, `o`.
    pub projections: BTreeMap<String, ProjectionRef>,
    pub norm: NormRef,
}

pub fn load_attention_weights(
    archive: impl AsRef<Path>,
    manifest: impl AsRef<Path>,
) -> Result<AttentionWeights> {
    let m: AttentionManifest = serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
    AttentionWeights::from_archive(&Archive::read(archive)?, &m)
}

pub fn save_attention_weights(
    w: &AttentionWeights,
    archive: impl AsRef<Path>,
    manifest: impl AsRef<Path>,
) -> Result<()> {
    let (a, m) = w.to_archive()?;
    a.write(archive)?;
    std::fs::write(manifest, serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// Per-token standardization (population variance, `LN_EPS`) followed by the affine.
pub fn layer_norm(x: &Tokens, gamma: &[f64], beta: &[f64]) -> Tokens {
    let d = x.dim();
    x.map_rows(d, |row, dst| {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for k in 0..d {
            dst[k] = (row[k] - mean) * inv * gamma[k] + beta[k];
        }
    })
}

/// Cross-attention output with the intermediate values tests look at.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub output: Tokens,
    /// `probs[query][head][key]`
    pub probs: Vec<Vec<Vec<f64>>>,
    /// Concatenated per-head mixtures before the output projection.
    pub mixed: Tokens,
    /// Value rows after projection (`keys × dim`).
    pub values: Tokens,
}

pub fn cross_attention(q: &Tokens, kv: &Tokens, w: &AttentionWeights) -> Result<Tokens> {
    cross_attention_traced(q, kv, w).map(|t| t.output)
}

/// Multi-head `softmax(Q Kᵀ / sqrt(d_head)) V`, heads concatenated, then `Wo`.
pub fn cross_attention_traced(
    q: &Tokens,
    kv: &Tokens,
    w: &AttentionWeights,
) -> Result<AttentionTrace> {
    if q.dim() != w.dim() {
        return Err(Error::dims(format!(
            "query width {} != attention width {}",
            q.dim(),
            w.dim()
        )));
    }
    if kv.dim() != w.kv_dim() {
        return Err(Error::dims(format!(
            "key/value width {} != attention input {}",
            kv.dim(),
            w.kv_dim()
        )));
    }
    if kv.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = w.dim();
    let heads = w.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qp = w.q.forward(q)?;
    let kp = w.k.forward(kv)?;
    let vp = w.v.forward(kv)?;

    let per_query = par::map_range(qp.len(), |i| {
        let qi = qp.row(i);
        let mut mixed = vec![0.0; d];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = kp
                .rows()
                .map(|k| dot(&qi[span.clone()], &k[span.clone()]) * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
            // v0 + Σ p_j (v_j - v0): equal to Σ p_j v_j, and exact when all values agree
            let v0 = &vp.row(0)[span.clone()];
            mixed[span.clone()].copy_from_slice(v0);
            for (j, pj) in p.iter().enumerate().skip(1) {
                for ((m, v), b) in mixed[span.clone()]
                    .iter_mut()
                    .zip(&vp.row(j)[span.clone()])
                    .zip(v0)
                {
                    *m += pj * (v - b);
                }
            }
            probs.push(p);
        }
        (mixed, probs)
    });

    let mut mixed = Tokens::empty(d);
    let mut probs = Vec::with_capacity(per_query.len());
    for (m, p) in per_query {
        mixed.push(&m)?;
        probs.push(p);
    }
    let output = w.o.forward(&mixed)?;
    Ok(AttentionTrace {
        output,
        probs,
        mixed,
        values: vp,
    })
}

/// `x + Attn(LN(x), ctx, ctx)`
pub fn residual_attention(x: &Tokens, ctx: &Tokens, w: &AttentionWeights) -> Result<Tokens> {
    let normed = layer_norm(x, &w.norm_gamma, &w.norm_beta);
    let delta = cross_attention(&normed, ctx, w)?;
    let mut out = x.clone();
    for i in 0..out.len() {
        for (o, dv) in out.row_mut(i).iter_mut().zip(delta.row(i)) {
            *o += dv;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfusionConfig {
    /// Contextual padding for the local crop.
    pub beta: f64,
    /// Token grid `[rows, cols]` of the local crop after resizing.
    pub local_grid: [usize; 2],
    /// Token grid `[rows, cols]` of the whole image after resizing.
    pub global_grid: [usize; 2],
}

impl Default for InfusionConfig {
    fn default() -> Self {
        Self {
            beta: 1.5,
            local_grid: [16, 16],
            global_grid: [24, 24],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Local,
    Global,
}

/// Object tokens after one or both infusion stages.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTokenSet {
    pub source_object: String,
    pub timestamp: Option<f64>,
    pub tokens: Tokens,
    pub stages_applied: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedSidecar {
    pub object_id: String,
    pub timestamp: Option<f64>,
    pub n: usize,
    pub stages: Vec<Stage>,
}

impl FusedTokenSet {
    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut a = Archive::new();
        a.push_f64(
            "tokens",
            &[self.n(), self.tokens.dim()],
            self.tokens.as_slice(),
        )?;
        a.write(path)?;
        let side = FusedSidecar {
            object_id: self.source_object.clone(),
            timestamp: self.timestamp,
            n: self.n(),
            stages: self.stages_applied.clone(),
        };
        std::fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&side)? + "\n",
        )?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let tokens = read_tokens(&Archive::read(path)?)?;
        let side: FusedSidecar =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        if side.n != tokens.len() {
            return Err(Error::format(format!(
                "sidecar says n = {}, archive holds {}",
                side.n,
                tokens.len()
            )));
        }
        Ok(Self {
            source_object: side.object_id,
            timestamp: side.timestamp,
            tokens,
            stages_applied: side.stages,
        })
    }
}

fn encode_resized(
    image: &ImageBuffer,
    grid: [usize; 2],
    encoder: &dyn VisionEncoder,
    w: &AttentionWeights,
) -> Result<Tokens> {
    let p = encoder.patch();
    let resized = resize_bilinear(image, grid[1] * p.patch_w, grid[0] * p.patch_h);
    let fm = encoder.encode(&resized)?;
    if fm.embed_dim() != w.kv_dim() {
        return Err(Error::dims(format!(
            "encoder width {} != attention key/value width {}",
            fm.embed_dim(),
            w.kv_dim()
        )));
    }
    Ok(fm.tokens)
}

/// Local features: encoder output on the padded object crop, resized to `local_grid`.
pub fn local_features(
    image: &ImageBuffer,
    mask: &BinaryMask,
    w: &AttentionWeights,
    encoder: &dyn VisionEncoder,
    cfg: &InfusionConfig,
) -> Result<Tokens> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::dims("image and mask sizes differ".to_string()));
    }
    let bbox = bounding_box(mask)?;
    let padded = contextual_pad(&bbox, image.width(), image.height(), cfg.beta);
    encode_resized(&crop(image, &padded)?, cfg.local_grid, encoder, w)
}

/// Global features: encoder output on the whole image resized to `global_grid`.
pub fn global_features(
    image: &ImageBuffer,
    w: &AttentionWeights,
    encoder: &dyn VisionEncoder,
    cfg: &InfusionConfig,
) -> Result<Tokens> {
    encode_resized(image, cfg.global_grid, encoder, w)
}

pub fn local_to_object(
    tr: &ObjectTokenSet,
    image: &ImageBuffer,
    mask: &BinaryMask,
    w: &AttentionWeights,
    encoder: &dyn VisionEncoder,
    cfg: &InfusionConfig,
) -> Result<FusedTokenSet> {
    let fl = local_features(image, mask, w, encoder, cfg)?;
    Ok(FusedTokenSet {
        source_object: tr.object_id.clone(),
        timestamp: tr.timestamp,
        tokens: residual_attention(&tr.tokens, &fl, w)?,
        stages_applied: vec![Stage::Local],
    })
}

pub fn global_to_object(
    partial: FusedTokenSet,
    image: &ImageBuffer,
    w: &AttentionWeights,
    encoder: &dyn VisionEncoder,
    cfg: &InfusionConfig,
) -> Result<FusedTokenSet> {
    let fg = global_features(image, w, encoder, cfg)?;
    let tokens = residual_attention(&partial.tokens, &fg, w)?;
    let mut stages = partial.stages_applied;
    stages.push(Stage::Global);
    stages.sort();
    stages.dedup();
    Ok(FusedTokenSet {
        tokens,
        stages_applied: stages,
        ..partial
    })
}

pub fn infuse(
    tr: &ObjectTokenSet,
    image: &ImageBuffer,
    mask: &BinaryMask,
    w_local: &AttentionWeights,
    w_global: &AttentionWeights,
    encoder: &dyn VisionEncoder,
    cfg: &InfusionConfig,
) -> Result<FusedTokenSet> {
    let local = local_to_object(tr, image, mask, w_local, encoder, cfg)?;
    global_to_object(local, image, w_global, encoder, cfg)
}

/// Sinusoidal embedding of `t` seconds: entry `2k` is `sin(t·ω_k)`, entry
/// `2k+1` is `cos(t·ω_k)`, with `ω_k = 10000^(-2k/dim)`.
pub fn timestamp_embedding(t: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let k = i / 2;
            let omega = 10000f64.powf(-((2 * k) as f64) / dim as f64);
            if i % 2 == 0 {
                (t * omega).sin()
            } else {
                (t * omega).cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentLabel {
    Sys,
    Vision,
    Text,
    Object,
    Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: SegmentLabel,
    pub count: usize,
    /// What the segment's payload comes from (archive path, object id).
    #[serde(skip)]
    pub source: Option<String>,
}

impl Segment {
    pub fn new(label: SegmentLabel, count: usize) -> Self {
        Self {
            label,
            count,
            source: None,
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }
}

/// Segments contributed by one object at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutFragment {
    pub segments: Vec<Segment>,
    pub timestamp_embedding: Option<Vec<f64>>,
}

impl LayoutFragment {
    pub fn object(n: usize, source: impl Into<String>) -> Self {
        Self {
            segments: vec![Segment::new(SegmentLabel::Object, n).with_source(source)],
            timestamp_embedding: None,
        }
    }

    pub fn token_count(&self) -> usize {
        self.segments.iter().map(|s| s.count).sum()
    }
}

/// One timestamp token followed by the frame's `n` object tokens.
pub fn timestamp_prefix(
    n: usize,
    dim: usize,
    t: f64,
    source: impl Into<String>,
) -> Result<LayoutFragment> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::NegativeTimestamp(t));
    }
    let source = source.into();
    Ok(LayoutFragment {
        segments: vec![
            Segment::new(SegmentLabel::Timestamp, 1).with_source(format!("t={t}")),
            Segment::new(SegmentLabel::Object, n).with_source(source),
        ],
        timestamp_embedding: Some(timestamp_embedding(t, dim)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Framework {
    /// `[sys][vision][text][object...]`
    VisionObject,
    /// `[sys][text][object...]`
    ObjectOnly,
}

/// Ordered token segments handed to the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub segments: Vec<Segment>,
}

#[derive(Serialize, Deserialize)]
struct LayoutJson {
    segments: Vec<Segment>,
    total: usize,
}

impl SequenceLayout {
    pub fn total(&self) -> usize {
        self.segments.iter().map(|s| s.count).sum()
    }

    pub fn count_of(&self, label: SegmentLabel) -> usize {
        self.segments
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.count)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let j = LayoutJson {
            segments: self.segments.clone(),
            total: self.total(),
        };
        Ok(serde_json::to_string_pretty(&j)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: LayoutJson = serde_json::from_str(text)?;
        let layout = Self {
            segments: j.segments,
        };
        if layout.total() != j.total {
            return Err(Error::format(format!(
                "layout total {} != segment sum {}",
                j.total,
                layout.total()
            )));
        }
        Ok(layout)
    }
}

pub fn assemble_sequence(
    framework: Framework,
    vision_tokens: Option<usize>,
    objects: &[LayoutFragment],
    text_len: usize,
    sys_len: usize,
) -> Result<SequenceLayout> {
    let mut segments = vec![Segment::new(SegmentLabel::Sys, sys_len)];
    match (framework, vision_tokens) {
        (Framework::VisionObject, Some(lz)) => {
            segments.push(Segment::new(SegmentLabel::Vision, lz))
        }
        (Framework::VisionObject, None) => return Err(Error::MissingVision),
        (Framework::ObjectOnly, Some(_)) => return Err(Error::UnexpectedVision),
        (Framework::ObjectOnly, None) => {}
    }
    segments.push(Segment::new(SegmentLabel::Text, text_len));
    for f in objects {
        segments.extend(f.segments.iter().cloned());
    }
    Ok(SequenceLayout { segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{PatchConfig, StubEncoder};
    use crate::geometry::ScalePlan;
    use crate::tokenizer::Provenance;

    fn tokens(rows: &[&[f64]]) -> Tokens {
        Tokens::from_rows(rows).unwrap()
    }

    fn ident_attn(d: usize, heads: usize) -> AttentionWeights {
        AttentionWeights::new(
            heads,
            Linear::identity(d, d),
            Linear::identity(d, d),
            Linear::identity(d, d),
            Linear::identity(d, d),
            vec![1.0; d],
            vec![0.0; d],
        )
        .unwrap()
    }

    #[test]
    fn layer_norm_examples() {
        let c = layer_norm(&tokens(&[&[3.0, 3.0, 3.0]]), &[1.0; 3], &[0.0; 3]);
        assert!(c.as_slice().iter().all(|v| v.abs() <= 1e-2));
        let std = tokens(&[&[-1.0, 1.0]]);
        let out = layer_norm(&std, &[1.0; 2], &[0.0; 2]);
        // var = 1 so only epsilon perturbs the values
        assert!(out
            .as_slice()
            .iter()
            .zip(std.as_slice())
            .all(|(a, b)| (a - b).abs() < 1e-5));
        let out = layer_norm(&tokens(&[&[1.0, 3.0]]), &[1.0; 2], &[0.0; 2]);
        assert!((out.row(0)[0] + 1.0).abs() < 1e-4 && (out.row(0)[1] - 1.0).abs() < 1e-4);
        let out = layer_norm(&tokens(&[&[1.0, 3.0]]), &[2.0, 1.0], &[0.5, 0.0]);
        assert!((out.row(0)[0] + 1.5).abs() < 1e-4);
    }

    #[test]
    fn attention_collapses_to_uniform_values() {
        let mut w = ident_attn(4, 2);
        w.q = Linear::seeded(4, 4, 1, true);
        w.k = Linear::seeded(4, 4, 2, true);
        // every value row equal to v
        w.v = Linear::new(4, 4, vec![0.0; 16], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let q = tokens(&[&[1.0, 2.0, 3.0, 4.0], &[-1.0, 0.0, 1.0, 0.5]]);
        let kv = tokens(&[
            &[0.3, 0.1, 0.2, 0.9],
            &[1.0, 1.0, -1.0, 0.0],
            &[5.0, 4.0, 3.0, 2.0],
        ]);
        let out = cross_attention(&q, &kv, &w).unwrap();
        for r in out.rows() {
            assert_eq!(r, [0.5, -1.0, 2.0, 0.25]);
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut w = ident_attn(2, 1);
        w.q = Linear::seeded(2, 2, 7, true);
        let kv = tokens(&[&[0.75, -0.5]]);
        let out = cross_attention(&tokens(&[&[1.0, 2.0], &[9.0, -3.0]]), &kv, &w).unwrap();
        assert!(out.rows().all(|r| r == [0.75, -0.5]));
    }

    #[test]
    fn one_head_two_keys_by_hand() {
        let w = ident_attn(2, 1);
        let q = tokens(&[&[1.0, 0.0]]);
        let kv = tokens(&[&[1.0, 0.0], &[0.0, 2.0]]);
        // scores: 1/sqrt2 and 0; p0 = e^a / (e^a + 1)
        let a = 1.0 / 2f64.sqrt();
        let p0 = a.exp() / (a.exp() + 1.0);
        let expect = [p0 * 1.0, (1.0 - p0) * 2.0];
        let out = cross_attention(&q, &kv, &w).unwrap();
        assert!(
            (out.row(0)[0] - expect[0]).abs() < 1e-12 && (out.row(0)[1] - expect[1]).abs() < 1e-12
        );
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let w = ident_attn(4, 2);
        assert!(matches!(
            cross_attention(&Tokens::zeros(1, 3), &Tokens::zeros(1, 4), &w),
            Err(Error::DimMismatch(_))
        ));
        assert!(matches!(
            cross_attention(&Tokens::zeros(1, 4), &Tokens::zeros(1, 5), &w),
            Err(Error::DimMismatch(_))
        ));
        assert!(AttentionWeights::seeded(6, 6, 4, 0, false).is_err());
    }

    fn object(n: usize, d: usize) -> ObjectTokenSet {
        ObjectTokenSet {
            object_id: "o".into(),
            timestamp: None,
            tokens: Tokens::from_flat(d, (0..n * d).map(|i| (i as f64 * 0.7).cos()).collect())
                .unwrap(),
            provenance: Provenance {
                pre_aggregation_count: n,
                padded: false,
                scale_plan: ScalePlan::identity(),
            },
        }
    }

    fn scene() -> (ImageBuffer, BinaryMask, StubEncoder) {
        let img = ImageBuffer::from_fn(50, 40, 3, |x, y, c| {
            ((x * 7 + y * 3 + c) % 11) as f64 / 11.0
        })
        .unwrap();
        let mask =
            BinaryMask::from_fn(50, 40, |x, y| (10..30).contains(&x) && (5..25).contains(&y))
                .unwrap();
        let enc = StubEncoder::rgb(PatchConfig::new(4, 4, 8).unwrap(), 3).unwrap();
        (img, mask, enc)
    }

    fn small_cfg() -> InfusionConfig {
        InfusionConfig {
            local_grid: [4, 4],
            global_grid: [6, 6],
            ..Default::default()
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let (img, mask, enc) = scene();
        let tr = object(5, 8);
        let wl = AttentionWeights::seeded(8, 8, 2, 1, false)
            .unwrap()
            .with_zero_output();
        let wg = AttentionWeights::seeded(8, 8, 2, 2, false)
            .unwrap()
            .with_zero_output();
        let l = local_to_object(&tr, &img, &mask, &wl, &enc, &small_cfg()).unwrap();
        assert_eq!(l.tokens, tr.tokens);
        let out = infuse(&tr, &img, &mask, &wl, &wg, &enc, &small_cfg()).unwrap();
        assert_eq!(out.tokens, tr.tokens);
        assert_eq!(out.stages_applied, vec![Stage::Local, Stage::Global]);
    }

    #[test]
    fn uniform_local_features_add_a_constant() {
        // flat image -> every local feature row equal; Wv = Wo = I -> T_l = T_R + v
        let img = ImageBuffer::from_fn(30, 30, 3, |_, _, c| 0.2 + 0.1 * c as f64).unwrap();
        let mask = BinaryMask::from_fn(30, 30, |x, y| x > 5 && y > 5 && x < 20 && y < 20).unwrap();
        let enc = StubEncoder::rgb(PatchConfig::new(4, 4, 8).unwrap(), 9).unwrap();
        let mut w = ident_attn(8, 2);
        w.q = Linear::seeded(8, 8, 4, true);
        let tr = object(3, 8);
        let fl = local_features(&img, &mask, &w, &enc, &small_cfg()).unwrap();
        let v = fl.row(0).to_vec();
        assert!(fl
            .rows()
            .all(|r| r.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12)));
        let out = local_to_object(&tr, &img, &mask, &w, &enc, &small_cfg()).unwrap();
        for (o, t) in out.tokens.rows().zip(tr.tokens.rows()) {
            for ((a, b), c) in o.iter().zip(t).zip(&v) {
                assert!((a - b - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_image_leaves_global_stage_unchanged() {
        let (_, mask, enc) = scene();
        let zero = ImageBuffer::zeros(50, 40, 3).unwrap();
        let w = AttentionWeights::seeded(8, 8, 2, 5, false).unwrap();
        let tl = FusedTokenSet {
            source_object: "o".into(),
            timestamp: None,
            tokens: object(4, 8).tokens,
            stages_applied: vec![Stage::Local],
        };
        let out = global_to_object(tl.clone(), &zero, &w, &enc, &small_cfg()).unwrap();
        assert_eq!(out.tokens, tl.tokens);
        let _ = mask;
    }

    #[test]
    fn hand_set_residual_stage() {
        // d = 2, 1 head, identity projections, flat local crop
        let img = ImageBuffer::from_fn(8, 8, 1, |_, _, _| 1.0).unwrap();
        let mask = BinaryMask::from_fn(8, 8, |x, y| x < 4 && y < 4).unwrap();
        let enc = StubEncoder::new(PatchConfig::new(2, 2, 2).unwrap(), 1, 0).unwrap();
        let w = ident_attn(2, 1);
        let cfg = InfusionConfig {
            beta: 1.0,
            local_grid: [1, 1],
            global_grid: [1, 1],
        };
        let tr = ObjectTokenSet {
            tokens: tokens(&[&[1.0, 3.0]]),
            ..object(1, 2)
        };
        let fl = local_features(&img, &mask, &w, &enc, &cfg).unwrap();
        assert_eq!(fl.len(), 1);
        // one key -> attention returns its value; residual adds it
        let out = local_to_object(&tr, &img, &mask, &w, &enc, &cfg).unwrap();
        assert!((out.tokens.row(0)[0] - (1.0 + fl.row(0)[0])).abs() < 1e-12);
        assert!((out.tokens.row(0)[1] - (3.0 + fl.row(0)[1])).abs() < 1e-12);
    }

    #[test]
    fn infuse_is_deterministic() {
        let (img, mask, enc) = scene();
        let tr = object(6, 8);
        let wl = AttentionWeights::seeded(8, 8, 4, 1, true).unwrap();
        let wg = AttentionWeights::seeded(8, 8, 4, 2, true).unwrap();
        let a = infuse(&tr, &img, &mask, &wl, &wg, &enc, &small_cfg()).unwrap();
        let b = par::with_workers(3, || {
            infuse(&tr, &img, &mask, &wl, &wg, &enc, &small_cfg()).unwrap()
        });
        assert_eq!(a, b);
        assert_eq!(a.n(), 6);
    }

    #[test]
    fn attention_weights_archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = AttentionWeights::seeded(8, 6, 2, 3, true).unwrap();
        let (a, m) = w.to_archive().unwrap();
        save_attention_weights(&w, dir.path().join("w.rtk"), dir.path().join("w.json")).unwrap();
        let back =
            load_attention_weights(dir.path().join("w.rtk"), dir.path().join("w.json")).unwrap();
        assert_eq!(back.to_archive().unwrap(), (a, m));
        assert_eq!(back.kv_dim(), 6);
    }

    #[test]
    fn timestamp_examples() {
        let f = timestamp_prefix(32, 6, 0.0, "o").unwrap();
        assert_eq!(
            f.segments
                .iter()
                .map(|s| (s.label, s.count))
                .collect::<Vec<_>>(),
            vec![(SegmentLabel::Timestamp, 1), (SegmentLabel::Object, 32)]
        );
        assert_eq!(
            f.timestamp_embedding.unwrap(),
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
        assert!(matches!(
            timestamp_prefix(4, 4, -0.5, "o"),
            Err(Error::NegativeTimestamp(_))
        ));
        let frames: Vec<_> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&t| timestamp_prefix(32, 4, t, "o").unwrap())
            .collect();
        let layout = assemble_sequence(Framework::ObjectOnly, None, &frames, 0, 0).unwrap();
        assert_eq!(
            layout.count_of(SegmentLabel::Object) + layout.count_of(SegmentLabel::Timestamp),
            3 * 33
        );
    }

    #[test]
    fn assembly_examples() {
        let one = [LayoutFragment::object(32, "a")];
        let l = assemble_sequence(Framework::ObjectOnly, None, &one, 10, 5).unwrap();
        assert_eq!(l.total(), 47);
        let l = assemble_sequence(Framework::VisionObject, Some(1408), &one, 10, 5).unwrap();
        assert_eq!(l.total(), 1455);
        assert_eq!(
            l.segments.iter().map(|s| s.label).collect::<Vec<_>>(),
            vec![
                SegmentLabel::Sys,
                SegmentLabel::Vision,
                SegmentLabel::Text,
                SegmentLabel::Object
            ]
        );
        let two = [
            LayoutFragment::object(32, "a"),
            LayoutFragment::object(32, "b"),
        ];
        let l = assemble_sequence(Framework::ObjectOnly, None, &two, 10, 5).unwrap();
        assert_eq!(l.total(), 5 + 10 + 64);
        let sources: Vec<_> = l.segments.iter().filter_map(|s| s.source.clone()).collect();
        assert_eq!(sources, vec!["a", "b"]);
        assert!(matches!(
            assemble_sequence(Framework::VisionObject, None, &two, 1, 1),
            Err(Error::MissingVision)
        ));
        assert!(matches!(
            assemble_sequence(Framework::ObjectOnly, Some(3), &two, 1, 1),
            Err(Error::UnexpectedVision)
        ));
    }

    #[test]
    fn layout_json_shape() {
        let l = assemble_sequence(
            Framework::ObjectOnly,
            None,
            &[LayoutFragment::object(2, "a")],
            3,
            1,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&l.to_json().unwrap()).unwrap();
        assert_eq!(v["total"], 6);
        assert_eq!(v["segments"][2]["label"], "object");
        assert_eq!(v["segments"][2].as_object().unwrap().len(), 2);
        assert_eq!(
            SequenceLayout::from_json(&l.to_json().unwrap())
                .unwrap()
                .total(),
            6
        );
    }
}
