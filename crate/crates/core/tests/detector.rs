use calltriage::dsp::detector_score_grid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Pixel-by-pixel count, recomputing both medians for every pixel. Grids
/// are expected to have a zero minimum, as normalised spectrograms do.
fn oracle(grid: &[f64], rows: usize, cols: usize) -> f64 {
    let mut hits = 0;
    for r in 0..rows {
        for c in 0..cols {
            let p = grid[r * cols + c];
            let col_med = median((0..rows).map(|i| grid[i * cols + c]).collect());
            let row_med = median((0..cols).map(|j| grid[r * cols + j]).collect());
            if p > col_med && p > 1.5 * row_med {
                hits += 1;
            }
        }
    }
    hits as f64 / (rows * cols) as f64
}

fn zero_floor(mut g: Vec<f64>) -> Vec<f64> {
    let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
    g.iter_mut().for_each(|v| *v -= lo);
    g
}

#[test]
fn matches_oracle_on_seeded_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let g = zero_floor((0..100).map(|_| rng.random::<f64>()).collect());
        assert_eq!(detector_score_grid(&g, 10, 10, 1.5), oracle(&g, 10, 10));
    }
}

#[test]
fn constant_grids_score_zero() {
    for v in [0.0, 1.0, -3.5, 1e9] {
        assert_eq!(detector_score_grid(&[v; 100], 10, 10, 1.5), 0.0);
    }
}

/// Values on a dyadic lattice so that shifting and scaling are exact.
fn lattice_grid() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u32..1024, 100).prop_map(|v| v.into_iter().map(|k| f64::from(k) / 1024.0).collect())
}

proptest! {
    #[test]
    fn oracle_agreement_on_lattice(g in lattice_grid()) {
        let g = zero_floor(g);
        prop_assert_eq!(detector_score_grid(&g, 10, 10, 1.5), oracle(&g, 10, 10));
    }

    #[test]
    fn shift_and_scale_invariant(g in lattice_grid(), shift in -4096i32..4096, scale_exp in -6i32..6, odd in prop::sample::select(vec![1.0, 3.0, 5.0, 7.0])) {
        let base = detector_score_grid(&g, 10, 10, 1.5);
        let shifted: Vec<f64> = g.iter().map(|v| v + f64::from(shift) / 1024.0).collect();
        let scale = odd * 2f64.powi(scale_exp);
        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
        prop_assert_eq!(detector_score_grid(&shifted, 10, 10, 1.5), base);
        prop_assert_eq!(detector_score_grid(&scaled, 10, 10, 1.5), base);
    }

    #[test]
    fn score_is_a_fraction(g in prop::collection::vec(-1e3f64..1e3, 100)) {
        let s = detector_score_grid(&g, 10, 10, 1.5);
        prop_assert!((0.0..=1.0).contains(&s));
        // at most half of every column lies strictly above its median
        prop_assert!(s <= 0.5);
    }
}
