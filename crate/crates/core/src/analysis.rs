//! Pairwise cosine-similarity diagnostics for token sets, used to compare
//! tokens before and after k-means aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{dot, Tokens};

pub const BINS: usize = 40;

/// Symmetric `count × count` cosine-similarity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMatrix {
    pub count: usize,
    pub values: Vec<f64>,
}

impl CosineMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.count + b]
    }

    /// Strict upper triangle, row by row.
    pub fn upper(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).flat_map(move |a| (a + 1..self.count).map(move |b| self.get(a, b)))
    }
}

pub fn cosine_matrix(tokens: &Tokens) -> Result<CosineMatrix> {
    if tokens.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let norms: Vec<f64> = tokens.rows().map(|r| dot(r, r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNormToken(i));
    }
    let n = tokens.len();
    let rows = par::map_range(n, |a| {
        (0..n)
            .map(|b| {
                if a == b {
                    1.0
                } else {
                    (dot(tokens.row(a), tokens.row(b)) / (norms[a] * norms[b])).clamp(-1.0, 1.0)
                }
            })
            .collect::<Vec<f64>>()
    });
    // exact symmetry: copy the upper triangle down
    let mut values = rows.concat();
    for a in 0..n {
        for b in 0..a {
            values[a * n + b] = values[b * n + a];
        }
    }
    Ok(CosineMatrix { count: n, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    /// Number of unordered token pairs.
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// `BINS` equal-width bins over `[-1, 1]`; 1.0 lands in the last bin.
    pub histogram: Vec<u64>,
}

pub fn bin_edges(i: usize) -> (f64, f64) {
    let w = 2.0 / BINS as f64;
    (-1.0 + i as f64 * w, -1.0 + (i + 1) as f64 * w)
}

fn bin_of(v: f64) -> usize {
    (((v + 1.0) / 2.0 * BINS as f64).floor() as usize).min(BINS - 1)
}

pub fn stats_of(tokens: &Tokens) -> Result<SimilarityStats> {
    let m = cosine_matrix(tokens)?;
    let mut histogram = vec![0u64; BINS];
    let (mut sum, mut min, mut max, mut count) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0usize);
    for v in m.upper() {
        histogram[bin_of(v)] += 1;
        sum += v;
        min = min.min(v);
        max = max.max(v);
        count += 1;
    }
    Ok(SimilarityStats {
        count,
        mean: sum / count as f64,
        min,
        max,
        histogram,
    })
}

pub fn similarity_stats(
    before: &Tokens,
    after: &Tokens,
) -> Result<(SimilarityStats, SimilarityStats)> {
    Ok((stats_of(before)?, stats_of(after)?))
}

pub const HISTOGRAM_CSV_HEADER: &str = "bin_left,bin_right,count_before,count_after";

pub fn histogram_csv(before: &SimilarityStats, after: &SimilarityStats) -> String {
    let mut out = String::from(HISTOGRAM_CSV_HEADER);
    out.push('\n');
    for i in 0..BINS {
        let (l, r) = bin_edges(i);
        out.push_str(&format!(
            "{l:.3},{r:.3},{},{}\n",
            before.histogram[i], after.histogram[i]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::aggregate_kmeans;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tokens {
        Tokens::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!(
            (cosine_matrix(&t(&[&[1.0, 2.0], &[1.0, 2.0]]))
                .unwrap()
                .get(0, 1)
                - 1.0)
                .abs()
                < 1e-12
        );
        assert_eq!(
            cosine_matrix(&t(&[&[1.0, 0.0], &[0.0, 1.0]]))
                .unwrap()
                .get(0, 1),
            0.0
        );
        let m = cosine_matrix(&t(&[&[1.0, 0.0], &[1.0, 1.0]])).unwrap();
        assert!((m.get(1, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((m.get(1, 1) - 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine_matrix(&t(&[&[1.0, 0.0], &[0.0, 0.0]])),
            Err(Error::ZeroNormToken(1))
        ));
        assert!(cosine_matrix(&t(&[&[1.0]])).is_err());
    }

    #[test]
    fn stats_examples() {
        let x = t(&[&[1.0, 0.2], &[0.3, 1.0], &[-1.0, 0.5]]);
        let (a, b) = similarity_stats(&x, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count, 3);
        assert_eq!(a.histogram.iter().sum::<u64>(), 3);

        let (o, _) = similarity_stats(&t(&[&[1.0, 0.0], &[0.0, 1.0]]), &x).unwrap();
        assert_eq!((o.count, o.mean), (1, 0.0));
        assert_eq!(o.histogram[20], 1);
    }

    #[test]
    fn aggregation_lowers_similarity_on_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let centers: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut rows = Vec::new();
        for i in 0..60 {
            let c = &centers[i % 4];
            rows.push(
                c.iter()
                    .map(|v| v + rng.random_range(-0.05..0.05))
                    .collect::<Vec<f64>>(),
            );
        }
        let before = Tokens::from_rows(&rows).unwrap();
        let after = aggregate_kmeans(&before, 4, 10, 1).unwrap().centroids;
        let (b, a) = similarity_stats(&before, &after).unwrap();
        assert!(a.mean < b.mean, "{} !< {}", a.mean, b.mean);
    }

    #[test]
    fn csv_has_every_bin() {
        let x = t(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let (a, b) = similarity_stats(&x, &x).unwrap();
        let csv = histogram_csv(&a, &b);
        assert_eq!(csv.lines().count(), BINS + 1);
        assert!(csv.starts_with(HISTOGRAM_CSV_HEADER));
        assert!(csv.lines().last().unwrap().starts_with("0.950,1.000,"));
    }

    proptest! {
        #[test]
        fn symmetric_and_scale_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(0.1f64..5.0, 3), 2..12),
            c in 0.01f64..100.0,
        ) {
            let x = Tokens::from_rows(&rows).unwrap();
            let m = cosine_matrix(&x).unwrap();
            let scaled = Tokens::from_flat(3, x.as_slice().iter().map(|v| v * c).collect()).unwrap();
            let ms = cosine_matrix(&scaled).unwrap();
            for a in 0..m.count {
                for b in 0..m.count {
                    prop_assert!((m.get(a, b) - m.get(b, a)).abs() <= 1e-7);
                    prop_assert!((m.get(a, b) - ms.get(a, b)).abs() <= 1e-9);
                }
            }
            let s = stats_of(&x).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s.mean));
            prop_assert_eq!(s.histogram.iter().sum::<u64>() as usize, s.count);
        }
    }
}
