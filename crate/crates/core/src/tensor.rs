//! Dense row-major token matrices and affine layers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// A list of equally sized embeddings stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    dim: usize,
    data: Vec<f64>,
}

impl Tokens {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn zeros(count: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; count * dim],
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::dims("token dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::dims(format!(
                "{} values do not divide into rows of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or(Error::EmptyInput)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::dims(format!(
                    "row {i} has {} values, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::dims(format!(
                "pushed row has {} values, expected {}",
                row.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.dim);
        for &i in indices {
            out.data.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Applies `f` to every row in parallel, producing rows of `out_dim`.
    pub fn map_rows<F>(&self, out_dim: usize, f: F) -> Tokens
    where
        F: Fn(&[f64], &mut [f64]) + Sync + Send,
    {
        let mut out = Tokens::zeros(self.len(), out_dim);
        if out_dim > 0 {
            par::for_each_chunk_mut(&mut out.data, out_dim, |i, dst| f(self.row(i), dst));
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Affine map `y = W x + b` with `W` stored as `out_dim × in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::dims(format!(
                "linear {in_dim}->{out_dim} needs {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Identity on the first `min(in, out)` coordinates, zero elsewhere.
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        let mut l = Self::zeros(in_dim, out_dim);
        for i in 0..in_dim.min(out_dim) {
            l.weight[i * in_dim + i] = 1.0;
        }
        l
    }

    /// Uniform weights in `[-1/sqrt(in), 1/sqrt(in))` drawn from ChaCha8 seeded
    /// with `seed`, row by row; biases drawn after the weights from the same stream.
    pub fn seeded(in_dim: usize, out_dim: usize, seed: u64, with_bias: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = if with_bias {
            (0..out_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect()
        } else {
            vec![0.0; out_dim]
        };
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = self.bias[o] + dot(&self.weight[o * self.in_dim..(o + 1) * self.in_dim], x);
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim];
        self.apply_into(x, &mut y);
        y
    }

    pub fn forward(&self, x: &Tokens) -> Result<Tokens> {
        if x.dim() != self.in_dim {
            return Err(Error::dims(format!(
                "input dim {} != linear in_dim {}",
                x.dim(),
                self.in_dim
            )));
        }
        Ok(x.map_rows(self.out_dim, |r, dst| self.apply_into(r, dst)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Tanh approximation of GELU.
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let t = Tokens::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.row(1), &[3.0, 4.0]);
        assert_eq!(t.select(&[1, 0]).as_slice(), &[3.0, 4.0, 1.0, 2.0]);
        assert!(Tokens::from_flat(3, vec![0.0; 4]).is_err());
    }

    #[test]
    fn linear_matches_hand_values() {
        let l = Linear::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -0.5]).unwrap();
        assert_eq!(l.apply(&[1.0, 1.0]), vec![3.5, 6.5]);
        assert_eq!(
            Linear::identity(3, 2).apply(&[7.0, 8.0, 9.0]),
            vec![7.0, 8.0]
        );
    }

    #[test]
    fn seeded_is_deterministic() {
        assert_eq!(Linear::seeded(4, 3, 9, true), Linear::seeded(4, 3, 9, true));
        assert_ne!(
            Linear::seeded(4, 3, 9, true),
            Linear::seeded(4, 3, 10, true)
        );
    }

    #[test]
    fn gelu_shape() {
        let g = Activation::Gelu;
        assert_eq!(g.apply(0.0), 0.0);
        assert!((g.apply(10.0) - 10.0).abs() < 1e-9);
        assert!(g.apply(-10.0).abs() < 1e-9);
        assert!((g.apply(1.0) - 0.841_192).abs() < 1e-5);
    }
}
