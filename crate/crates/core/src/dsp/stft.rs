use rustfft::num_complex::Complex;
use rustfft::Fft;

use super::StftConfig;
use crate::error::{Error, Result};

/// Periodic Hann taper, `w[k] = 0.5 (1 - cos(2 pi k / n))`.
pub fn hann(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("taper length must be at least 1"));
    }
    let step = 2.0 * std::f64::consts::PI / n as f64;
    Ok((0..n).map(|k| 0.5 * (1.0 - (step * k as f64).cos())).collect())
}

/// STFT magnitudes, frame-major: `data[frame * bins + bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnitudes {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Magnitudes {
    pub fn frame(&self, f: usize) -> &[f64] {
        &self.data[f * self.bins..(f + 1) * self.bins]
    }
}

pub fn stft_magnitude(samples: &[f32], cfg: &StftConfig) -> Result<Magnitudes> {
    cfg.validate()?;
    let taper = hann(cfg.taper_len)?;
    let fft = rustfft::FftPlanner::new().plan_fft_forward(cfg.taper_len);
    stft_with(samples, cfg, &taper, fft.as_ref())
}

pub(crate) fn stft_with(samples: &[f32], cfg: &StftConfig, taper: &[f64], fft: &dyn Fft<f64>) -> Result<Magnitudes> {
    let n = cfg.taper_len;
    if samples.len() < n {
        return Err(Error::invalid(format!(
            "window of {} samples is shorter than the {n}-sample taper",
            samples.len()
        )));
    }
    let frames = (samples.len() - n) / cfg.hop + 1;
    let bins = cfg.n_bins();
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..frames {
        let seg = &samples[f * cfg.hop..f * cfg.hop + n];
        for ((slot, &s), &w) in buf.iter_mut().zip(seg).zip(taper) {
            *slot = Complex::new(f64::from(s) * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(Magnitudes { frames, bins, data })
}
