//! Flat tensor archive.
//!
//! Layout: the magic `RTK1`, one JSON header line terminated by `\n`, zero
//! padding up to the next 64-byte boundary, then the tensor payloads as
//! little-endian `f32`. Each payload starts on a 64-byte boundary; header
//! offsets are relative to the start of the payload section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RTK1";
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<HeaderEntry>,
}

fn align_up(v: usize) -> usize {
    v.div_ceil(ALIGN) * ALIGN
}

/// Ordered collection of named `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    tensors: Vec<Tensor>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::dims(format!(
                "tensor {name}: shape {shape:?} holds {count} values, got {}",
                data.len()
            )));
        }
        if self.get(name).is_some() {
            return Err(Error::format(format!("duplicate tensor name {name}")));
        }
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    /// Stores `f64` values narrowed to `f32`.
    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        self.push(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format(format!("archive has no tensor named {name}")))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            let nbytes = t.data.len() * 4;
            entries.push(HeaderEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset,
                nbytes,
            });
            offset = align_up(offset + nbytes);
        }
        let header =
            serde_json::to_string(&Header { tensors: entries }).expect("header serializes");
        let start = align_up(MAGIC.len() + header.len() + 1);
        let mut out = Vec::with_capacity(start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for t in &self.tensors {
            out.resize(align_up(out.len()), 0);
            debug_assert!(out.len() >= start);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if self.tensors.is_empty() {
            out.resize(start, 0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format("missing RTK1 magic"));
        }
        let rest = &bytes[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("unterminated archive header"))?;
        let header: Header = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::format(format!("bad archive header: {e}")))?;
        let start = align_up(MAGIC.len() + nl + 1);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::format(format!(
                    "tensor {}: unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let count: usize = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(format!("tensor {}: shape overflows", e.name)))?;
            if count.checked_mul(4) != Some(e.nbytes) {
                return Err(Error::format(format!(
                    "tensor {}: nbytes {} does not match shape",
                    e.name, e.nbytes
                )));
            }
            if e.offset % ALIGN != 0 {
                return Err(Error::format(format!(
                    "tensor {}: offset {} is not 64-byte aligned",
                    e.name, e.offset
                )));
            }
            let lo = start + e.offset;
            let hi = lo
                .checked_add(e.nbytes)
                .filter(|&hi| hi <= bytes.len())
                .ok_or_else(|| Error::format(format!("tensor {}: payload truncated", e.name)))?;
            let data = bytes[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_aligned() {
        let mut a = Archive::new();
        a.push("a", &[3], vec![1.0, 2.0, 3.0]).unwrap();
        a.push("b", &[2, 2], vec![4.0; 4]).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"RTK1");
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let start = align_up(nl + 1);
        assert_eq!(&bytes[start..start + 4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[start + 64..start + 68], &4.0f32.to_le_bytes());
        assert_eq!(bytes.len(), start + 64 + 16);
    }

    #[test]
    fn truncation_and_garbage_are_format_errors() {
        let mut a = Archive::new();
        a.push("x", &[2, 2, 8], vec![0.5; 32]).unwrap();
        let bytes = a.to_bytes();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(
                matches!(Archive::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        assert!(matches!(
            Archive::from_bytes(b"RTK2{}\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(Archive::from_bytes(b"RTK1{\"tensors\":[{\"name\":\"x\",\"shape\":[1],\"dtype\":\"f16\",\"offset\":0,\"nbytes\":2}]}\n"), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_and_duplicates_rejected() {
        let mut a = Archive::new();
        assert!(a.push("x", &[2, 3], vec![0.0; 5]).is_err());
        a.push("x", &[1], vec![0.0]).unwrap();
        assert!(a.push("x", &[1], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(
            tensors in proptest::collection::vec(
                proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), 0..50), 0..5)
        ) {
            let mut a = Archive::new();
            for (i, t) in tensors.iter().enumerate() {
                a.push(&format!("t{i}"), &[t.len()], t.clone()).unwrap();
            }
            let bytes = a.to_bytes();
            let back = Archive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for (orig, got) in a.tensors().iter().zip(back.tensors()) {
                let ob: Vec<u32> = orig.data.iter().map(|v| v.to_bits()).collect();
                let gb: Vec<u32> = got.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ob, gb);
            }
        }
    }
}
