//! k-means over reference embeddings, silhouette diagnostics and sampling
//! of cluster members for expert review.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_K: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            seed: 0,
            n_init: 8,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations: usize,
}

impl KMeansModel {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest centroid; ties go to the lowest cluster id.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::shape(self.dim, x.len()));
        }
        Ok(nearest(&self.centroids, self.k, x).0)
    }
}

/// Cluster id per input row, aligned with the embedding manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub window_ids: Vec<String>,
    pub clusters: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.window_ids
            .iter()
            .zip(&self.clusters)
            .filter(|(_, &c)| c == cluster)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.clusters {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn cluster_of(&self, window_id: &str) -> Option<usize> {
        self.window_ids
            .iter()
            .position(|w| w == window_id)
            .map(|i| self.clusters[i])
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

fn nearest(centroids: &[f64], k: usize, x: &[f64]) -> (usize, f64) {
    let dim = x.len();
    let mut best = (0, f64::INFINITY);
    for c in 0..k {
        let d = squared_distance(&centroids[c * dim..(c + 1) * dim], x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations; the best of `n_init`
/// restarts by inertia wins (ties go to the earliest restart).
pub fn kmeans_fit(rows: &[Vec<f64>], cfg: &KMeansConfig) -> Result<(KMeansModel, Vec<usize>)> {
    let n = rows.len();
    if cfg.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n < cfg.k {
        return Err(Error::invalid(format!(
            "k-means needs at least k = {} rows, got {n}",
            cfg.k
        )));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("rows have differing dimensions"));
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.n_init.max(1)).map(|_| seeder.random()).collect();
    let runs = par::map(&seeds, |&s| lloyd(rows, dim, cfg, s));
    let (mut model, labels) = runs
        .into_iter()
        .reduce(|best, run| if run.0.inertia < best.0.inertia { run } else { best })
        .expect("at least one restart");
    model.seed = cfg.seed;
    Ok((model, labels))
}

fn kmeans_pp(rows: &[Vec<f64>], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rows.len();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(&rows[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = rows.iter().map(|r| squared_distance(r, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(&rows[pick]);
        let c = centroids[start..].to_vec();
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(squared_distance(r, &c));
        }
    }
    centroids
}

fn lloyd(rows: &[Vec<f64>], dim: usize, cfg: &KMeansConfig, seed: u64) -> (KMeansModel, Vec<usize>) {
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(rows, dim, k, &mut rng);
    let mut prev_inertia = f64::INFINITY;
    let mut labels = vec![0; rows.len()];
    let mut iterations = 0;

    loop {
        let assigned = par::map(rows, |r| nearest(&centroids, k, r));
        labels.iter_mut().zip(&assigned).for_each(|(l, a)| *l = a.0);
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        debug_assert!(
            inertia <= prev_inertia * (1.0 + 1e-9) + 1e-12,
            "Lloyd step increased inertia: {prev_inertia} -> {inertia}"
        );
        iterations += 1;
        let converged = prev_inertia.is_finite()
            && (inertia == 0.0 || (prev_inertia - inertia).abs() / prev_inertia.max(f64::MIN_POSITIVE) < cfg.tol);
        if converged || iterations >= cfg.max_iter {
            return (
                KMeansModel {
                    k,
                    dim,
                    centroids,
                    inertia,
                    seed,
                    iterations,
                },
                labels,
            );
        }
        prev_inertia = inertia;

        // update step
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            sums[l * dim..(l + 1) * dim]
                .iter_mut()
                .zip(r)
                .for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                    .for_each(|(m, s)| *m = s * inv);
            }
        }
        // Empty clusters take the point farthest from its (updated) centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = rows
                    .iter()
                    .zip(&labels)
                    .enumerate()
                    .filter(|(_, (_, &l))| counts[l] > 1)
                    .map(|(i, (r, &l))| (i, squared_distance(r, &centroids[l * dim..(l + 1) * dim])))
                    .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                if far.0 != usize::MAX {
                    let i = far.0;
                    counts[labels[i]] -= 1;
                    labels[i] = c;
                    counts[c] = 1;
                    centroids[c * dim..(c + 1) * dim].copy_from_slice(&rows[i]);
                }
            }
        }
    }
}

/// Rows of `matrix` as f64, optionally scaled to unit L2 norm (zero rows stay zero).
pub fn prepare_rows(matrix: &EmbeddingMatrix, l2_normalize: bool) -> Vec<Vec<f64>> {
    let mut rows = matrix.to_f64_rows();
    if l2_normalize {
        for r in &mut rows {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    rows
}

/// [`kmeans_fit`] over an embedding matrix, labelling rows by window id.
pub fn fit_matrix(
    matrix: &EmbeddingMatrix,
    cfg: &KMeansConfig,
    l2_normalize: bool,
) -> Result<(KMeansModel, ClusterAssignment)> {
    let rows = prepare_rows(matrix, l2_normalize);
    let (model, clusters) = kmeans_fit(&rows, cfg)?;
    let assignment = ClusterAssignment {
        window_ids: matrix.window_ids.clone(),
        clusters,
        k: model.k,
    };
    Ok((model, assignment))
}

/// Mean silhouette coefficient with Euclidean distances. When there are more
/// than `sample_cap` points the coefficient is computed on a seeded subsample.
/// Points in singleton clusters contribute 0.
pub fn silhouette(rows: &[Vec<f64>], labels: &[usize], sample_cap: usize, seed: u64) -> Result<f64> {
    if rows.len() != labels.len() {
        return Err(Error::shape(rows.len(), labels.len()));
    }
    let (rows, labels): (Vec<&Vec<f64>>, Vec<usize>) = if rows.len() > sample_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, rows.len(), sample_cap).into_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| (&rows[i], labels[i])).unzip()
    } else {
        (rows.iter().collect(), labels.to_vec())
    };
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two non-empty clusters"));
    }
    let ids: Vec<usize> = counts.keys().copied().collect();
    let scores = par::map_range(rows.len(), |i| {
        let own = labels[i];
        if counts[&own] == 1 {
            return 0.0;
        }
        let mut sums: BTreeMap<usize, f64> = ids.iter().map(|&c| (c, 0.0)).collect();
        for (j, r) in rows.iter().enumerate() {
            if j != i {
                *sums.get_mut(&labels[j]).expect("known label") += distance(rows[i], r);
            }
        }
        let a = sums[&own] / (counts[&own] - 1) as f64;
        let b = ids
            .iter()
            .filter(|&&c| c != own)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            (b - a) / denom
        } else {
            0.0
        }
    });
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Up to `n` members of `cluster`, drawn uniformly without replacement.
pub fn sample_for_review(assignment: &ClusterAssignment, cluster: usize, n: usize, seed: u64) -> Result<Vec<String>> {
    if cluster >= assignment.k {
        return Err(Error::NotFound(format!("cluster {cluster}")));
    }
    let members = assignment.members(cluster);
    if members.is_empty() {
        return Err(Error::NotFound(format!("cluster {cluster} has no members")));
    }
    if members.len() <= n {
        return Ok(members.into_iter().map(String::from).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (cluster as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    Ok(sample(&mut rng, members.len(), n)
        .into_iter()
        .map(|i| members[i].to_string())
        .collect())
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
