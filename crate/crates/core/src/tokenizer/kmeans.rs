//! Seeded k-means aggregation of redundant object tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{sq_dist, Tokens};

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    /// Exactly `n` rows.
    pub centroids: Tokens,
    /// Cluster index of every input token.
    pub assignments: Vec<usize>,
    /// Fewer than `n` inputs; rows were repeated cyclically to reach `n`.
    pub padded: bool,
    /// Whether Lloyd iterations ran at all (false when `count <= n`).
    pub clustered: bool,
    /// Total within-cluster squared error after each completed iteration.
    pub sse_history: Vec<f64>,
}

/// Initial centroid indices: `n` distinct token indices sampled without
/// replacement from ChaCha8 seeded with `seed`.
pub fn initial_indices(count: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, count, n).into_vec()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &Tokens) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.rows().enumerate() {
        let d = sq_dist(point, row);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn recompute_means(
    tokens: &Tokens,
    assignments: &[usize],
    n: usize,
    centroids: &mut Tokens,
) -> Vec<usize> {
    let dim = tokens.dim();
    let mut sums = vec![0.0; n * dim];
    let mut sizes = vec![0usize; n];
    for (p, &c) in assignments.iter().enumerate() {
        sizes[c] += 1;
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(tokens.row(p)) {
            *s += v;
        }
    }
    for c in 0..n {
        if sizes[c] > 0 {
            let inv = sizes[c] as f64;
            for (dst, s) in centroids
                .row_mut(c)
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *dst = s / inv;
            }
        }
    }
    sizes
}

fn sse(tokens: &Tokens, assignments: &[usize], centroids: &Tokens) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(p, &c)| sq_dist(tokens.row(p), centroids.row(c)))
        .sum()
}

/// Merges `tokens` into exactly `n` cluster means.
///
/// With `count <= n` clustering is skipped and the inputs are returned in
/// order, cycled to length `n`. Otherwise each of up to `k_iters` rounds
/// assigns every token to its nearest centroid and replaces each centroid
/// by the mean of its members. A cluster left empty takes the token that is
/// farthest from its own centroid among clusters with at least two members
/// (lowest token index on ties), and the donor cluster's mean is refreshed.
/// Iteration stops early once a round changes nothing, which yields the
/// same result as running all rounds.
pub fn aggregate_kmeans(
    tokens: &Tokens,
    n: usize,
    k_iters: usize,
    seed: u64,
) -> Result<Aggregation> {
    let count = tokens.len();
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    if n == 0 {
        return Err(Error::InvalidConfig(
            "cluster count must be positive".into(),
        ));
    }
    if count <= n {
        let idx: Vec<usize> = (0..n).map(|i| i % count).collect();
        return Ok(Aggregation {
            centroids: tokens.select(&idx),
            assignments: (0..count).collect(),
            padded: count < n,
            clustered: false,
            sse_history: Vec::new(),
        });
    }

    let mut centroids = tokens.select(&initial_indices(count, n, seed));
    let mut assignments: Vec<usize> = Vec::new();
    let mut sse_history = Vec::with_capacity(k_iters);
    for _ in 0..k_iters {
        let next = par::map_range(count, |p| nearest(tokens.row(p), &centroids));
        let unchanged = next == assignments;
        assignments = next;
        let mut sizes = recompute_means(tokens, &assignments, n, &mut centroids);

        let mut reseeded = false;
        for empty in 0..n {
            if sizes[empty] > 0 {
                continue;
            }
            let mut pick: Option<(usize, f64)> = None;
            for (p, &c) in assignments.iter().enumerate() {
                if sizes[c] < 2 {
                    continue;
                }
                let d = sq_dist(tokens.row(p), centroids.row(c));
                if pick.is_none_or(|(_, best)| d > best) {
                    pick = Some((p, d));
                }
            }
            // count > n guarantees some cluster holds two or more tokens
            let (p, _) = pick.expect("a cluster with two members exists");
            let donor = assignments[p];
            assignments[p] = empty;
            sizes[donor] -= 1;
            sizes[empty] = 1;
            centroids.row_mut(empty).copy_from_slice(tokens.row(p));
            let members: Vec<usize> = (0..count).filter(|&q| assignments[q] == donor).collect();
            let dim = tokens.dim();
            let mut mean = vec![0.0; dim];
            for &q in &members {
                for (m, v) in mean.iter_mut().zip(tokens.row(q)) {
                    *m += v;
                }
            }
            let size = members.len() as f64;
            for (dst, m) in centroids.row_mut(donor).iter_mut().zip(&mean) {
                *dst = m / size;
            }
            reseeded = true;
        }

        sse_history.push(sse(tokens, &assignments, &centroids));
        if unchanged && !reseeded {
            break;
        }
    }

    Ok(Aggregation {
        centroids,
        assignments,
        padded: false,
        clustered: true,
        sse_history,
    })
}
