use serde::{Deserialize, Serialize};

use super::{MelSpectrogram, SPEC_SIZE};
use crate::ingest::CorpusRole;

/// Thresholds for discarding low-activity windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Field windows are kept when `score >= field_min_score`.
    pub field_min_score: f64,
    /// Reference windows are kept when `score > reference_min_score`.
    pub reference_min_score: f64,
    pub row_factor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            field_min_score: 0.1,
            reference_min_score: 0.3,
            row_factor: 1.5,
        }
    }
}

impl DetectorConfig {
    pub fn keeps(&self, role: CorpusRole, score: f64) -> bool {
        match role {
            CorpusRole::Field => score >= self.field_min_score,
            CorpusRole::Reference => score > self.reference_min_score,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fraction of pixels strictly above their column median and strictly above
/// `row_factor` times their row median. `grid` is row-major, `rows x cols`.
///
/// Both sides of the row test are measured from the grid minimum, which is
/// 0 for every normalised spectrogram. That keeps the score unchanged when a
/// constant is added to all pixels.
pub fn detector_score_grid(grid: &[f64], rows: usize, cols: usize, row_factor: f64) -> f64 {
    assert_eq!(grid.len(), rows * cols);
    if grid.is_empty() {
        return 0.0;
    }
    let floor = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let row_medians: Vec<f64> = grid.chunks_exact(cols).map(|r| median(&mut r.to_vec())).collect();
    let col_medians: Vec<f64> = (0..cols)
        .map(|c| median(&mut (0..rows).map(|r| grid[r * cols + c]).collect::<Vec<_>>()))
        .collect();
    let count = grid
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > col_medians[i % cols] && p - floor > row_factor * (row_medians[i / cols] - floor))
        .count();
    count as f64 / grid.len() as f64
}

/// Detector score of a final 100x100 spectrogram with the default 1.5 row factor.
pub fn detector_score(spec: &MelSpectrogram) -> f64 {
    let grid: Vec<f64> = spec.values.iter().map(|&v| f64::from(v)).collect();
    detector_score_grid(&grid, SPEC_SIZE, SPEC_SIZE, DetectorConfig::default().row_factor)
}

/// Ids of the windows whose score passes the threshold for `role`.
pub fn filter_windows<'a>(
    scored: impl IntoIterator<Item = (&'a str, f64)>,
    role: CorpusRole,
    cfg: &DetectorConfig,
) -> Vec<&'a str> {
    scored
        .into_iter()
        .filter(|&(_, s)| cfg.keeps(role, s))
        .map(|(id, _)| id)
        .collect()
}
