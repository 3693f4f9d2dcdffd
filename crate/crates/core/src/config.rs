//! Run configuration shared by the CLI and tests.
//!
//! Every random component takes its seed from an explicit per-component
//! value or, failing that, from the master `seed` plus a fixed offset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{PatchConfig, StubEncoder};
use crate::error::{Error, Result};
use crate::infusion::{load_attention_weights, AttentionWeights, InfusionConfig};
use crate::io::Archive;
use crate::tensor::Activation;
use crate::tokenizer::{ProjectionWeights, TokenizerConfig};

const ENCODER_OFFSET: u64 = 0;
const KMEANS_OFFSET: u64 = 1;
const PROJECTION_OFFSET: u64 = 2;
const LOCAL_OFFSET: u64 = 3;
const GLOBAL_OFFSET: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
    pub seed: Option<u64>,
    /// Precomputed global feature map (tensor archive) for vision-object layouts.
    pub vision_features: Option<PathBuf>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            patch_h: 14,
            patch_w: 14,
            embed_dim: 64,
            seed: None,
            vision_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub n: usize,
    pub k_iters: usize,
    pub beta: f64,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// k-means initialization seed.
    pub seed: Option<u64>,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        let d = TokenizerConfig::default();
        Self {
            n: d.n,
            k_iters: d.k_iters,
            beta: d.beta,
            hidden_dim: d.hidden_dim,
            out_dim: d.out_dim,
            activation: d.activation,
            seed: None,
        }
    }
}

/// Where a weight bundle comes from: a seed or files, never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSource {
    Seeded(SeedSource),
    File(FileSource),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSource {
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub weights: PathBuf,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

impl Default for WeightSource {
    fn default() -> Self {
        WeightSource::Seeded(SeedSource::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub heads: usize,
    pub kv_bias: bool,
    pub local: WeightSource,
    pub global: WeightSource,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self {
            heads: 8,
            kv_bias: false,
            local: WeightSource::default(),
            global: WeightSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    /// Registry name (`2B`, `7B`) or path to a model-dims JSON file.
    pub model: String,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self { model: "2B".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderSection,
    pub tokenizer: TokenizerSection,
    pub projection: WeightSource,
    pub attention: AttentionSection,
    pub infusion: InfusionConfig,
    /// System-prompt segment length in assembled layouts.
    pub sys_len: usize,
    pub budget: BudgetSection,
    /// Worker threads; 0 picks the rayon default.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderSection::default(),
            tokenizer: TokenizerSection::default(),
            projection: WeightSource::default(),
            attention: AttentionSection::default(),
            infusion: InfusionConfig::default(),
            sys_len: 5,
            budget: BudgetSection::default(),
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file; relative weight paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for src in [
            &mut self.projection,
            &mut self.attention.local,
            &mut self.attention.global,
        ] {
            if let WeightSource::File(f) = src {
                fix(&mut f.weights);
                if let Some(m) = f.manifest.as_mut() {
                    fix(m);
                }
            }
        }
        if let Some(v) = self.encoder.vision_features.as_mut() {
            fix(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch()?;
        self.tokenizer_config().validate()?;
        if self.attention.heads == 0 || !self.tokenizer.out_dim.is_multiple_of(self.attention.heads)
        {
            return Err(Error::InvalidConfig(format!(
                "out_dim {} must be divisible by {} attention heads",
                self.tokenizer.out_dim, self.attention.heads
            )));
        }
        if self.infusion.local_grid.contains(&0) || self.infusion.global_grid.contains(&0) {
            return Err(Error::InvalidConfig(
                "infusion grids must be nonempty".into(),
            ));
        }
        Ok(())
    }

    pub fn patch(&self) -> Result<PatchConfig> {
        PatchConfig::new(
            self.encoder.patch_h,
            self.encoder.patch_w,
            self.encoder.embed_dim,
        )
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        let t = &self.tokenizer;
        TokenizerConfig {
            n: t.n,
            k_iters: t.k_iters,
            beta: t.beta,
            seed: t.seed.unwrap_or(self.seed.wrapping_add(KMEANS_OFFSET)),
            embed_dim: self.encoder.embed_dim,
            hidden_dim: t.hidden_dim,
            out_dim: t.out_dim,
            activation: t.activation,
        }
    }

    pub fn encoder(&self) -> Result<StubEncoder> {
        StubEncoder::rgb(
            self.patch()?,
            self.encoder
                .seed
                .unwrap_or(self.seed.wrapping_add(ENCODER_OFFSET)),
        )
    }

    pub fn projection_weights(&self) -> Result<ProjectionWeights> {
        let cfg = self.tokenizer_config();
        let w = match &self.projection {
            WeightSource::Seeded(s) => ProjectionWeights::seeded(
                &cfg,
                s.seed.unwrap_or(self.seed.wrapping_add(PROJECTION_OFFSET)),
            ),
            WeightSource::File(f) => {
                ProjectionWeights::from_archive(&Archive::read(&f.weights)?, cfg.activation)?
            }
        };
        if w.embed_dim() != cfg.embed_dim || w.out_dim() != cfg.out_dim {
            return Err(Error::dims(format!(
                "projection weights map {}->{}, config wants {}->{}",
                w.embed_dim(),
                w.out_dim(),
                cfg.embed_dim,
                cfg.out_dim
            )));
        }
        Ok(w)
    }

    fn attention(&self, src: &WeightSource, offset: u64) -> Result<AttentionWeights> {
        let (d, kv) = (self.tokenizer.out_dim, self.encoder.embed_dim);
        let w = match src {
            WeightSource::Seeded(s) => AttentionWeights::seeded(
                d,
                kv,
                self.attention.heads,
                s.seed.unwrap_or(self.seed.wrapping_add(offset)),
                self.attention.kv_bias,
            )?,
            WeightSource::File(f) => {
                let manifest = f.manifest.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("attention weight files need a manifest".into())
                })?;
                load_attention_weights(&f.weights, manifest)?
            }
        };
        if w.dim() != d || w.kv_dim() != kv {
            return Err(Error::dims(format!(
                "attention weights are {}x{}, config wants {d}x{kv}",
                w.dim(),
                w.kv_dim()
            )));
        }
        Ok(w)
    }

    pub fn local_attention(&self) -> Result<AttentionWeights> {
        self.attention(&self.attention.local, LOCAL_OFFSET)
    }

    pub fn global_attention(&self) -> Result<AttentionWeights> {
        self.attention(&self.attention.global, GLOBAL_OFFSET)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokenizer_config().n, 32);
        assert_eq!(c.local_attention().unwrap().heads, 8);
        assert_ne!(c.local_attention().unwrap(), c.global_attention().unwrap());
    }

    #[test]
    fn seed_and_files_are_exclusive() {
        let ok = r#"{"attention": {"local": {"seed": 3}}}"#;
        assert!(RunConfig::from_json(ok).is_ok());
        let both = r#"{"attention": {"local": {"seed": 3, "weights": "w.rtk"}}}"#;
        assert!(RunConfig::from_json(both).is_err());
        let file = r#"{"projection": {"weights": "p.rtk"}}"#;
        assert!(matches!(
            RunConfig::from_json(file).unwrap().projection,
            WeightSource::File(_)
        ));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"tokenizr": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"tokenizer": {"n": 100}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"tokenizer": {"out_dim": 30}}"#).is_err());
    }

    #[test]
    fn explicit_component_seed_wins() {
        let a = RunConfig::from_json(r#"{"seed": 7, "tokenizer": {"seed": 99}}"#).unwrap();
        assert_eq!(a.tokenizer_config().seed, 99);
        let b = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(b.tokenizer_config().seed, 8);
    }

    #[test]
    fn file_weights_load_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        let base = RunConfig::default();
        crate::infusion::save_attention_weights(
            &base.local_attention().unwrap().with_zero_output(),
            dir.path().join("local.rtk"),
            dir.path().join("local.json"),
        )
        .unwrap();
        base.projection_weights()
            .unwrap()
            .to_archive()
            .unwrap()
            .write(dir.path().join("proj.rtk"))
            .unwrap();
        let cfg = r#"{"projection": {"weights": "proj.rtk"},
                      "attention": {"local": {"weights": "local.rtk", "manifest": "local.json"}}}"#;
        std::fs::write(dir.path().join("run.json"), cfg).unwrap();
        let c = RunConfig::load(dir.path().join("run.json")).unwrap();
        assert!(c
            .local_attention()
            .unwrap()
            .o
            .weight
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            c.projection_weights().unwrap().to_archive().unwrap(),
            base.projection_weights().unwrap().to_archive().unwrap()
        );
    }
}
