//! Spectrogram extraction and the activity detector.
//!
//! A one-second window becomes a 100x100 image: Hann STFT magnitudes are
//! projected onto a mel filterbank, normalised by their global maximum,
//! log-compressed, resized along time and min-max scaled into `[0, 1]`.

mod detector;
mod mel;
mod render;
mod stft;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CorpusRole, WindowedClip};

pub use detector::{detector_score, detector_score_grid, filter_windows, DetectorConfig};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, Filterbank};
pub use render::{decode_png_gray, render_png};
pub use stft::{hann, stft_magnitude, Magnitudes};

/// Side length of the square spectrogram image.
pub const SPEC_SIZE: usize = 100;
pub const SPEC_PIXELS: usize = SPEC_SIZE * SPEC_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub taper_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            taper_len: 1024,
            hop: 256,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taper_len == 0 || self.hop == 0 || self.hop > self.taper_len {
            return Err(Error::Config(format!(
                "stft requires 0 < hop ({}) <= taper length ({})",
                self.hop, self.taper_len
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.taper_len / 2 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_eps: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: SPEC_SIZE,
            f_min: 0.0,
            f_max: 10_000.0,
            log_eps: 0.001,
        }
    }
}

/// Normalised log-mel image; `values[row * 100 + col]`, row 0 is the lowest
/// mel band and column 0 the earliest frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub window_id: String,
    pub values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(window_id: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        if values.len() != SPEC_PIXELS {
            return Err(Error::shape(format!("{SPEC_SIZE}x{SPEC_SIZE}"), values.len()));
        }
        Ok(Self {
            window_id: window_id.into(),
            values,
        })
    }

    pub fn zeros(window_id: impl Into<String>) -> Self {
        Self {
            window_id: window_id.into(),
            values: vec![0.0; SPEC_PIXELS],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * SPEC_SIZE + col]
    }
}

/// Reusable extractor holding the FFT plan, taper and filterbank.
#[derive(Clone)]
pub struct SpectrogramExtractor {
    stft: StftConfig,
    mel: MelConfig,
    sample_rate: u32,
    taper: Arc<Vec<f64>>,
    filterbank: Arc<Filterbank>,
    fft: Arc<dyn rustfft::Fft<f64>>,
}

impl std::fmt::Debug for SpectrogramExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectrogramExtractor")
            .field("stft", &self.stft)
            .field("mel", &self.mel)
            .field("sample_rate", &self.sample_rate)
            .finish_non_exhaustive()
    }
}

impl SpectrogramExtractor {
    pub fn new(stft: StftConfig, mel: MelConfig, sample_rate: u32) -> Result<Self> {
        stft.validate()?;
        if mel.n_mels != SPEC_SIZE {
            return Err(Error::Config(format!(
                "n_mels must be {SPEC_SIZE} so the image needs no frequency resize, got {}",
                mel.n_mels
            )));
        }
        if mel.log_eps <= 0.0 {
            return Err(Error::Config("log_eps must be positive".into()));
        }
        let filterbank = mel_filterbank(&mel, stft.taper_len, sample_rate)?;
        let fft = rustfft::FftPlanner::new().plan_fft_forward(stft.taper_len);
        Ok(Self {
            stft,
            mel,
            sample_rate,
            taper: Arc::new(hann(stft.taper_len)?),
            filterbank: Arc::new(filterbank),
            fft,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn filterbank(&self) -> &Filterbank {
        &self.filterbank
    }

    pub fn magnitudes(&self, samples: &[f32]) -> Result<Magnitudes> {
        stft::stft_with(samples, &self.stft, &self.taper, self.fft.as_ref())
    }

    /// Mel-band amplitudes, `n_mels x frames`, before any normalisation.
    pub fn mel_amplitudes(&self, samples: &[f32]) -> Result<(Vec<f64>, usize)> {
        let mags = self.magnitudes(samples)?;
        Ok((self.filterbank.apply(&mags), mags.frames))
    }

    pub fn log_mel(&self, window_id: &str, samples: &[f32]) -> Result<MelSpectrogram> {
        let (mut mel, frames) = self.mel_amplitudes(samples)?;
        let peak = mel.iter().copied().fold(0.0f64, f64::max);
        if peak > 0.0 {
            mel.iter_mut().for_each(|v| *v /= peak);
        }
        let eps = self.mel.log_eps;
        mel.iter_mut().for_each(|v| *v = (*v + eps).log10());

        let mut image = resize_columns(&mel, SPEC_SIZE, frames, SPEC_SIZE);
        let (lo, hi) = image.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let range = hi - lo;
        if range > 0.0 {
            image.iter_mut().for_each(|v| *v = (*v - lo) / range);
        } else {
            image.iter_mut().for_each(|v| *v = 0.0);
        }
        MelSpectrogram::new(window_id, image.into_iter().map(|v| v as f32).collect())
    }

    pub fn window(&self, window: &WindowedClip) -> Result<MelSpectrogram> {
        if window.sample_rate != self.sample_rate {
            return Err(Error::Config(format!(
                "window `{}` is at {} Hz, extractor expects {} Hz",
                window.window_id, window.sample_rate, self.sample_rate
            )));
        }
        self.log_mel(&window.window_id, &window.samples)
    }

    /// Converts windows to spectrograms, in input order.
    pub fn batch(&self, windows: &[WindowedClip]) -> Result<Vec<MelSpectrogram>> {
        crate::par::map(windows, |w| self.window(w)).into_iter().collect()
    }
}

/// Builds the default-configuration extractor for `window` and converts it.
pub fn log_mel(window: &WindowedClip, stft: &StftConfig, mel: &MelConfig) -> Result<MelSpectrogram> {
    SpectrogramExtractor::new(*stft, *mel, window.sample_rate)?.window(window)
}

/// Linear interpolation along the column axis of a row-major grid, with the
/// first and last columns mapped onto each other exactly.
pub fn resize_columns(grid: &[f64], rows: usize, cols: usize, out_cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * out_cols];
    if cols == 0 || out_cols == 0 {
        return out;
    }
    let scale = if out_cols > 1 {
        (cols - 1) as f64 / (out_cols - 1) as f64
    } else {
        0.0
    };
    for j in 0..out_cols {
        let pos = j as f64 * scale;
        let lo = (pos.floor() as usize).min(cols - 1);
        let hi = (lo + 1).min(cols - 1);
        let frac = pos - lo as f64;
        for r in 0..rows {
            let a = grid[r * cols + lo];
            let b = grid[r * cols + hi];
            out[r * out_cols + j] = if frac == 0.0 { a } else { a + (b - a) * frac };
        }
    }
    out
}

/// Scores and keeps the windows that pass the detector threshold for their role.
pub fn keep_active(specs: &[MelSpectrogram], role: CorpusRole, cfg: &DetectorConfig) -> Vec<usize> {
    let scored: Vec<(usize, f64)> = crate::par::map(specs, detector_score).into_iter().enumerate().collect();
    scored
        .into_iter()
        .filter(|&(_, s)| cfg.keeps(role, s))
        .map(|(i, _)| i)
        .collect()
}
