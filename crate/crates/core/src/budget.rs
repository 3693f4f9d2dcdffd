//! Analytical prefill FLOPs for the two input layouts.
//!
//! One transformer block over `n` tokens costs
//! `2nd² + 2n·d·d_kv + 2n²d + 3n·d·m`. The vision-object layout runs every
//! block over `L_R + L_Z` tokens; the object-only layout runs them over `L_R`
//! tokens and adds `2(L_R + L_ZL)d² + 2(L_R + L_ZG)d²` for the two infusion
//! attentions. All arithmetic is exact in `u128`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer accounting dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub name: String,
    /// Free-form note on where the numbers come from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    pub d: u64,
    pub d_kv: u64,
    pub m: u64,
    /// Multiplicity `K_s` of each block.
    pub layers: Vec<u64>,
}

const BUILTIN_2B: &str = include_str!("../configs/2B.json");
const BUILTIN_7B: &str = include_str!("../configs/7B.json");

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_kv == 0 || self.m == 0 {
            return Err(Error::InvalidConfig(format!(
                "{}: d, d_kv and m must be positive",
                self.name
            )));
        }
        if self.layers.is_empty() || self.layers.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "{}: layers must be a nonempty list of positive multiplicities",
                self.name
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dims: ModelDims = serde_json::from_str(text)?;
        dims.validate()?;
        Ok(dims)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Shipped registry entries: `"2B"` and `"7B"`.
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "2B" | "2b" => BUILTIN_2B,
            "7B" | "7b" => BUILTIN_7B,
            _ => return None,
        };
        Some(Self::from_json(text).expect("shipped model configs parse"))
    }

    /// A registry name or a path to a JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Some(d) => Ok(d),
            None => Self::load(name_or_path),
        }
    }

    pub fn total_multiplicity(&self) -> u128 {
        self.layers.iter().map(|&k| k as u128).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenCounts {
    pub l_r: u64,
    pub l_z: u64,
    pub l_zl: u64,
    pub l_zg: u64,
}

fn mul(terms: &[u128]) -> Result<u128> {
    terms
        .iter()
        .try_fold(1u128, |acc, &t| acc.checked_mul(t))
        .ok_or(Error::Overflow)
}

fn add(a: u128, b: u128) -> Result<u128> {
    a.checked_add(b).ok_or(Error::Overflow)
}

/// `2nd² + 2n·d·d_kv + 2n²d + 3n·d·m`
pub fn block_flops(n: u64, dims: &ModelDims) -> Result<u128> {
    let (n, d, dkv, m) = (n as u128, dims.d as u128, dims.d_kv as u128, dims.m as u128);
    let mut total = mul(&[2, n, d, d])?;
    total = add(total, mul(&[2, n, d, dkv])?)?;
    total = add(total, mul(&[2, n, n, d])?)?;
    add(total, mul(&[3, n, d, m])?)
}

fn stacked(n: u64, dims: &ModelDims) -> Result<u128> {
    let per_block = block_flops(n, dims)?;
    dims.layers
        .iter()
        .try_fold(0u128, |acc, &k| add(acc, mul(&[k as u128, per_block])?))
}

pub fn vision_object_flops(tc: &TokenCounts, dims: &ModelDims) -> Result<u128> {
    let n = tc.l_r.checked_add(tc.l_z).ok_or(Error::Overflow)?;
    stacked(n, dims)
}

pub fn object_only_flops(tc: &TokenCounts, dims: &ModelDims) -> Result<u128> {
    let d2 = mul(&[dims.d as u128, dims.d as u128])?;
    let local = mul(&[2, tc.l_r as u128 + tc.l_zl as u128, d2])?;
    let global = mul(&[2, tc.l_r as u128 + tc.l_zg as u128, d2])?;
    add(add(stacked(tc.l_r, dims)?, local)?, global)
}

pub fn tera(flops: u128) -> f64 {
    flops as f64 / 1e12
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetFramework {
    VisionObject,
    ObjectOnly,
}

impl BudgetFramework {
    pub fn label(self) -> &'static str {
        match self {
            BudgetFramework::VisionObject => "vision-object",
            BudgetFramework::ObjectOnly => "object-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub framework: BudgetFramework,
    pub l_r: u64,
    pub l_z: u64,
    pub l_zl: u64,
    pub l_zg: u64,
    /// Exact count, serialized as a decimal string (exceeds JSON number range).
    #[serde(with = "u128_string")]
    pub flops: u128,
    pub flops_tera: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub config: ModelDims,
    pub counts: TokenCounts,
    #[serde(with = "u128_string")]
    pub vision_object: u128,
    #[serde(with = "u128_string")]
    pub object_only: u128,
    /// `vision_object / object_only`
    pub ratio: Option<f64>,
    pub vision_object_tokens: u64,
    pub object_only_tokens: u64,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

pub fn compare_frameworks(tc: &TokenCounts, dims: &ModelDims) -> Result<BudgetReport> {
    dims.validate()?;
    let vo = vision_object_flops(tc, dims)?;
    let oo = object_only_flops(tc, dims)?;
    let ratio = (vo > 0 && oo > 0).then(|| vo as f64 / oo as f64);
    Ok(BudgetReport {
        config: dims.clone(),
        counts: *tc,
        vision_object: vo,
        object_only: oo,
        ratio,
        vision_object_tokens: tc.l_r + tc.l_z,
        object_only_tokens: tc.l_r,
    })
}

impl BudgetReport {
    /// Two rows: vision-object (infusion counts zeroed) and object-only
    /// (vision count zeroed), both carrying the ratio.
    pub fn rows(&self) -> [BudgetRow; 2] {
        let c = &self.counts;
        [
            BudgetRow {
                framework: BudgetFramework::VisionObject,
                l_r: c.l_r,
                l_z: c.l_z,
                l_zl: 0,
                l_zg: 0,
                flops: self.vision_object,
                flops_tera: tera(self.vision_object),
                ratio: self.ratio,
            },
            BudgetRow {
                framework: BudgetFramework::ObjectOnly,
                l_r: c.l_r,
                l_z: 0,
                l_zl: c.l_zl,
                l_zg: c.l_zg,
                flops: self.object_only,
                flops_tera: tera(self.object_only),
                ratio: self.ratio,
            },
        ]
    }
}

pub const CSV_HEADER: &str = "framework,L_R,L_Z,L_ZL,L_ZG,flops,flops_tera,ratio";

pub fn csv_line(row: &BudgetRow) -> String {
    let ratio = row.ratio.map(|r| format!("{r:.6}")).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{:.6},{}",
        row.framework.label(),
        row.l_r,
        row.l_z,
        row.l_zl,
        row.l_zg,
        row.flops,
        row.flops_tera,
        ratio
    )
}

/// CSV for a list of reports, preceded by a `#` comment echoing each distinct config.
pub fn to_csv(reports: &[BudgetReport]) -> Result<String> {
    let mut out = String::new();
    let mut seen: Vec<&ModelDims> = Vec::new();
    for r in reports {
        if !seen.contains(&&r.config) {
            out.push_str(&format!("# config {}\n", serde_json::to_string(&r.config)?));
            seen.push(&r.config);
        }
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for row in r.rows() {
            out.push_str(&csv_line(&row));
            out.push('\n');
        }
    }
    Ok(out)
}
