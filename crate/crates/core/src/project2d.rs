//! 2-D views of embedding space: exact PCA and a compact UMAP.
//!
//! Projections are for display only; nothing downstream reads them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{distance, squared_distance};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Umap,
}

impl ProjectionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionMethod::Pca => "pca",
            ProjectionMethod::Umap => "umap",
        }
    }
}

impl std::str::FromStr for ProjectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ProjectionMethod::Pca),
            "umap" => Ok(ProjectionMethod::Umap),
            other => Err(Error::invalid(format!("unknown projection method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub coords: Vec<[f64; 2]>,
    pub method: ProjectionMethod,
    pub seed: Option<u64>,
    /// Fraction of total variance on each axis (PCA only).
    pub explained_variance: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UmapConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub epochs: usize,
    pub negative_sample_rate: usize,
    pub seed: u64,
}

impl Default for UmapConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            epochs: 200,
            negative_sample_rate: 5,
            seed: 0,
        }
    }
}

impl UmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(Error::invalid("n_neighbors must be at least 2"));
        }
        if !(self.min_dist > 0.0 && self.min_dist < 1.0) {
            return Err(Error::invalid("min_dist must lie in (0, 1)"));
        }
        if !(self.spread > 0.0) || self.epochs == 0 {
            return Err(Error::invalid("spread and epochs must be positive"));
        }
        Ok(())
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("rows have differing dimensions"));
    }
    Ok(dim)
}

/// Projection onto the top two principal axes.
///
/// Uses the `d x d` covariance or the `N x N` Gram matrix, whichever is
/// smaller. Each axis is oriented so its largest-magnitude loading is positive.
pub fn pca2(rows: &[Vec<f64>]) -> Result<Projection2D> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    let d = check_rows(rows)?;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let total: f64 = x.iter().map(|v| v * v).sum();

    let mut coords = vec![[0.0; 2]; n];
    let mut explained = [0.0; 2];
    let axes = d.min(2);
    if d <= n {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        let order = descending(eig.eigenvalues.as_slice());
        for (axis, &e) in order.iter().take(axes).enumerate() {
            let mut v = eig.eigenvectors.column(e).into_owned();
            orient(v.as_mut_slice());
            let scores = &x * &v;
            for i in 0..n {
                coords[i][axis] = scores[i];
            }
            explained[axis] = eig.eigenvalues[e].max(0.0);
        }
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let order = descending(eig.eigenvalues.as_slice());
        // eigenvalues at rounding level are rank deficiency, not signal; their
        // square roots would otherwise leak ~1e-8 coordinates
        let cutoff = eig.eigenvalues[order[0]].max(0.0) * f64::EPSILON * n.max(d) as f64;
        for (axis, &e) in order.iter().take(axes).enumerate() {
            let lambda = eig.eigenvalues[e];
            let lambda = if lambda > cutoff { lambda } else { 0.0 };
            let u = eig.eigenvectors.column(e).into_owned();
            // loadings v = X^T u / sqrt(lambda); only the sign matters here
            let mut loadings = x.transpose() * &u;
            let flip = if lambda > 0.0 {
                orient(loadings.as_mut_slice())
            } else {
                let mut u = u.clone();
                orient(u.as_mut_slice())
            };
            let s = lambda.sqrt() * if flip { -1.0 } else { 1.0 };
            for i in 0..n {
                coords[i][axis] = u[i] * s;
            }
            explained[axis] = lambda;
        }
    }
    let explained = if total > 0.0 {
        Some([explained[0] / total, explained[1] / total])
    } else {
        Some([0.0, 0.0])
    };
    Ok(Projection2D {
        coords,
        method: ProjectionMethod::Pca,
        seed: None,
        explained_variance: explained,
    })
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Flip `v` so its largest-magnitude entry is positive; returns whether it flipped.
fn orient(v: &mut [f64]) -> bool {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
        true
    } else {
        false
    }
}

/// Least-squares fit of `1 / (1 + a d^(2b))` to the UMAP target curve
/// (1 below `min_dist`, exponential decay with scale `spread` above) on 300
/// points in `[0, 3 * spread]`, by damped Gauss-Newton.
pub fn fit_ab(min_dist: f64, spread: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            if x < min_dist {
                1.0
            } else {
                (-(x - min_dist) / spread).exp()
            }
        })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b) = (1.0, 1.0);
    let mut lambda = 1e-3;
    let mut cost = sse(a, b);
    for _ in 0..500 {
        // J^T J and J^T r
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let f = 1.0 / (1.0 + a * p);
            let r = f - y;
            let da = -f * f * p;
            let db = -f * f * a * p * 2.0 * x.ln();
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let (maa, mbb) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
        let det = maa * mbb - jab * jab;
        let step_a = -(mbb * ga - jab * gb) / det;
        let step_b = -(maa * gb - jab * ga) / det;
        let (na, nb) = (a + step_a, b + step_b);
        let new_cost = if na > 0.0 && nb > 0.0 {
            sse(na, nb)
        } else {
            f64::INFINITY
        };
        if new_cost < cost {
            let done = (cost - new_cost) <= 1e-15 * cost;
            a = na;
            b = nb;
            cost = new_cost;
            lambda = (lambda * 0.3).max(1e-12);
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

/// Exact k nearest neighbours (self excluded), nearest first; ties go to the
/// lower index.
pub fn knn(rows: &[Vec<f64>], k: usize) -> Vec<Vec<(usize, f64)>> {
    par::map_range(rows.len(), |i| {
        let mut d: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, r)| (j, distance(&rows[i], r)))
            .collect();
        let k = k.min(d.len());
        if k < d.len() {
            d.select_nth_unstable_by(k, |a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            d.truncate(k);
        }
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        d
    })
}

/// Membership strengths of one point's neighbours: `rho` is the nearest
/// positive distance and `sigma` is bisected so the strengths sum to
/// `log2(k)`.
fn smooth_memberships(dists: &[f64]) -> Vec<f64> {
    let target = (dists.len() as f64).log2();
    let rho = dists.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
    let total = |sigma: f64| -> f64 { dists.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).sum() };
    let (mut lo, mut hi, mut sigma) = (0.0, f64::INFINITY, 1.0);
    for _ in 0..64 {
        let s = total(sigma);
        if (s - target).abs() < 1e-5 {
            break;
        }
        if s > target {
            hi = sigma;
            sigma = (lo + hi) / 2.0;
        } else {
            lo = sigma;
            sigma = if hi.is_finite() { (lo + hi) / 2.0 } else { sigma * 2.0 };
        }
    }
    let mean = dists.iter().sum::<f64>() / dists.len().max(1) as f64;
    let sigma = sigma.max(1e-3 * mean).max(f64::MIN_POSITIVE);
    dists.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).collect()
}

/// Symmetrised fuzzy graph as `(i, j, w)` edges with `i < j`.
pub fn fuzzy_graph(neighbors: &[Vec<(usize, f64)>]) -> Vec<(usize, usize, f64)> {
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, nn) in neighbors.iter().enumerate() {
        let dists: Vec<f64> = nn.iter().map(|p| p.1).collect();
        for (&(j, _), w) in nn.iter().zip(smooth_memberships(&dists)) {
            directed.insert((i, j), w);
        }
    }
    let mut edges = Vec::new();
    for (&(i, j), &u) in &directed {
        if i < j {
            let v = directed.get(&(j, i)).copied().unwrap_or(0.0);
            edges.push((i, j, u + v - u * v));
        } else if !directed.contains_key(&(j, i)) {
            edges.push((j, i, u));
        }
    }
    edges.sort_by_key(|e| (e.0, e.1));
    edges
}

fn clip(g: f64) -> f64 {
    g.clamp(-4.0, 4.0)
}

/// Simplified UMAP layout, reproducible bit-for-bit for a given seed.
pub fn umap2(rows: &[Vec<f64>], cfg: &UmapConfig) -> Result<Projection2D> {
    cfg.validate()?;
    let n = rows.len();
    if n <= cfg.n_neighbors {
        return Err(Error::invalid(format!(
            "UMAP needs more than n_neighbors = {} rows, got {n}",
            cfg.n_neighbors
        )));
    }
    check_rows(rows)?;
    let (a, b) = fit_ab(cfg.min_dist, cfg.spread);
    let edges = fuzzy_graph(&knn(rows, cfg.n_neighbors));

    let mut emb = pca2(rows)?.coords;
    let scale = emb.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for p in &mut emb {
        for v in p.iter_mut() {
            let base = if scale > 0.0 { *v * 10.0 / scale } else { 0.0 };
            *v = base + rng.random_range(-1e-4..1e-4);
        }
    }

    let w_max = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let epochs = cfg.epochs as f64;
    // Each undirected edge is sampled in both directions.
    let mut plan: Vec<(usize, usize, f64)> = Vec::with_capacity(edges.len() * 2);
    for &(i, j, w) in &edges {
        if w_max > 0.0 && w >= w_max / epochs {
            let eps = w_max / w;
            plan.push((i, j, eps));
            plan.push((j, i, eps));
        }
    }
    let neg_rate = cfg.negative_sample_rate as f64;
    let mut next_sample: Vec<f64> = plan.iter().map(|e| e.2).collect();
    let mut next_negative: Vec<f64> = plan.iter().map(|e| e.2 / neg_rate.max(1.0)).collect();

    for epoch in 0..cfg.epochs {
        let alpha = 1.0 - epoch as f64 / epochs;
        let now = epoch as f64;
        for (e, &(head, tail, eps)) in plan.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            let d2 = squared_distance(&emb[head], &emb[tail]);
            if d2 > 0.0 {
                let coeff = -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b));
                for c in 0..2 {
                    let g = clip(coeff * (emb[head][c] - emb[tail][c])) * alpha;
                    emb[head][c] += g;
                    emb[tail][c] -= g;
                }
            }
            next_sample[e] += eps;

            if cfg.negative_sample_rate > 0 {
                let eps_neg = eps / neg_rate;
                let n_neg = ((now - next_negative[e]) / eps_neg).floor().max(0.0) as usize;
                for _ in 0..n_neg {
                    let other = rng.random_range(0..n);
                    if other == head {
                        continue;
                    }
                    let d2 = squared_distance(&emb[head], &emb[other]);
                    for c in 0..2 {
                        let g = if d2 > 0.0 {
                            let coeff = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)));
                            clip(coeff * (emb[head][c] - emb[other][c]))
                        } else {
                            4.0
                        };
                        emb[head][c] += g * alpha;
                    }
                }
                next_negative[e] += n_neg as f64 * eps_neg;
            }
        }
    }
    if emb.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Divergence("UMAP layout produced non-finite coordinates".into()));
    }
    Ok(Projection2D {
        coords: emb,
        method: ProjectionMethod::Umap,
        seed: Some(cfg.seed),
        explained_variance: None,
    })
}

/// Rank-penalised trustworthiness of a low-dimensional layout over
/// `k`-neighbourhoods, in `[0, 1]`.
pub fn trustworthiness(high: &[Vec<f64>], low: &[[f64; 2]], k: usize) -> Result<f64> {
    let n = high.len();
    if low.len() != n {
        return Err(Error::shape(n, low.len()));
    }
    if k == 0 || 2 * k >= n {
        return Err(Error::invalid(format!(
            "trustworthiness needs 0 < k < N/2 (k = {k}, N = {n})"
        )));
    }
    let penalties = par::map_range(n, |i| {
        // rank of every j in the high-dimensional ordering around i (1-based)
        let mut order: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, squared_distance(&high[i], &high[j])))
            .collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let mut rank = vec![0usize; n];
        for (r, &(j, _)) in order.iter().enumerate() {
            rank[j] = r + 1;
        }
        let mut low_order: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, squared_distance(&low[i], &low[j])))
            .collect();
        low_order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        low_order[..k]
            .iter()
            .map(|&(j, _)| rank[j].saturating_sub(k) as f64)
            .sum::<f64>()
    });
    let (nf, kf) = (n as f64, k as f64);
    let norm = 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0));
    Ok(1.0 - norm * penalties.iter().sum::<f64>())
}
