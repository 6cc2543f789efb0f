use super::{Magnitudes, MelConfig};
use crate::error::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the non-negative FFT bins, `n_mels x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Filterbank {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
}

impl Filterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// Projects frame-major magnitudes onto the filters; the result is
    /// band-major, `n_mels x frames`.
    pub fn apply(&self, mags: &Magnitudes) -> Vec<f64> {
        assert_eq!(mags.bins, self.bins, "filterbank/stft bin mismatch");
        let mut out = vec![0.0; self.n_mels * mags.frames];
        for m in 0..self.n_mels {
            let w = self.row(m);
            let (first, last) = support(w);
            for f in 0..mags.frames {
                let frame = mags.frame(f);
                out[m * mags.frames + f] = (first..=last).map(|k| w[k] * frame[k]).sum();
            }
        }
        out
    }
}

fn support(w: &[f64]) -> (usize, usize) {
    let first = w.iter().position(|&v| v > 0.0).unwrap_or(0);
    let last = w.iter().rposition(|&v| v > 0.0).unwrap_or(0);
    (first, last)
}

pub fn mel_filterbank(cfg: &MelConfig, taper_len: usize, sample_rate: u32) -> Result<Filterbank> {
    let nyquist = f64::from(sample_rate) / 2.0;
    if !(cfg.f_min >= 0.0 && cfg.f_min < cfg.f_max && cfg.f_max <= nyquist) {
        return Err(Error::Config(format!(
            "mel range must satisfy 0 <= f_min ({}) < f_max ({}) <= {nyquist}",
            cfg.f_min, cfg.f_max
        )));
    }
    if cfg.n_mels == 0 || taper_len < 2 {
        return Err(Error::Config("filterbank needs at least one band and two taps".into()));
    }
    let bins = taper_len / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(sample_rate) / taper_len as f64;

    let mut weights = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > left && f < centre {
                (f - left) / (centre - left)
            } else if f >= centre && f < right {
                (right - f) / (right - centre)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel band {m} ({left:.1}-{right:.1} Hz) contains no FFT bin; \
                 reduce n_mels or increase the taper length"
            )));
        }
    }
    Ok(Filterbank {
        n_mels: cfg.n_mels,
        bins,
        weights,
    })
}
