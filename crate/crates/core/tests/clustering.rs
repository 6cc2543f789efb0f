use calltriage::cluster::{adjusted_rand_index, distance, kmeans_fit, silhouette, KMeansConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Three isotropic blobs with the given spread, centres 10 apart.
fn blobs(n_per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centres = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 5.0]];
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..n_per {
            rows.push(centre.iter().map(|m| m + noise.sample(&mut rng)).collect());
            labels.push(c);
        }
    }
    (rows, labels)
}

/// Direct O(N^2) silhouette.
fn silhouette_oracle(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = labels.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for i in 0..rows.len() {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for j in 0..rows.len() {
            if i != j {
                sum[labels[j]] += distance(&rows[i], &rows[j]);
                cnt[labels[j]] += 1;
            }
        }
        if cnt[labels[i]] == 0 {
            continue;
        }
        let a = sum[labels[i]] / cnt[labels[i]] as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && cnt[c] > 0)
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / rows.len() as f64
}

#[test]
fn separated_blobs_are_recovered() {
    let (rows, truth) = blobs(100, 0.1, 3);
    let cfg = KMeansConfig {
        k: 3,
        seed: 1,
        ..KMeansConfig::default()
    };
    let (_, labels) = kmeans_fit(&rows, &cfg).unwrap();
    assert_eq!(adjusted_rand_index(&labels, &truth), 1.0);
    assert!(silhouette(&rows, &labels, usize::MAX, 0).unwrap() > 0.8);
}

#[test]
fn silhouette_matches_quadratic_oracle() {
    for (n_per, sigma, seed) in [(20, 0.1, 1), (50, 2.0, 2), (66, 4.0, 3)] {
        let (rows, truth) = blobs(n_per, sigma, seed);
        let fast = silhouette(&rows, &truth, usize::MAX, 0).unwrap();
        assert!((fast - silhouette_oracle(&rows, &truth)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn points_sit_with_their_nearest_centroid(seed in any::<u64>(), k in 1usize..6, n in 6usize..40) {
        let (rows, _) = blobs(n.div_ceil(3), 3.0, seed);
        let cfg = KMeansConfig { k, seed, n_init: 2, ..KMeansConfig::default() };
        let (model, labels) = kmeans_fit(&rows, &cfg).unwrap();
        let mut inertia = 0.0;
        for (x, &l) in rows.iter().zip(&labels) {
            prop_assert_eq!(model.assign(x).unwrap(), l);
            inertia += distance(x, model.centroid(l)).powi(2);
        }
        prop_assert!((inertia - model.inertia).abs() <= 1e-9 * inertia.max(1.0));
        // same seed, same answer
        let (again, labels2) = kmeans_fit(&rows, &cfg).unwrap();
        prop_assert_eq!(labels2, labels);
        prop_assert_eq!(again.centroids, model.centroids);
    }

    #[test]
    fn ari_ignores_label_names(labels in prop::collection::vec(0usize..4, 2..60), perm in Just([2usize, 0, 3, 1])) {
        let renamed: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        prop_assert!((adjusted_rand_index(&labels, &renamed) - 1.0).abs() < 1e-12 || labels.iter().all(|&l| l == labels[0]));
    }
}
