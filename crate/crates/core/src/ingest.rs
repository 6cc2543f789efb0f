//! Audio decoding, resampling and windowing.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate every recording is converted to before analysis.
pub const PIPELINE_SAMPLE_RATE: u32 = 32_000;

/// A decoded mono recording.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub recording_id: String,
    pub sample_rate: u32,
    /// Amplitudes in `[-1, 1]`.
    pub samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(recording_id: impl Into<String>, sample_rate: u32, samples: Vec<f32>) -> Self {
        Self {
            recording_id: recording_id.into(),
            sample_rate,
            samples,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Reference,
    Field,
}

impl CorpusRole {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusRole::Reference => "reference",
            CorpusRole::Field => "field",
        }
    }
}

impl std::fmt::Display for CorpusRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CorpusRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(CorpusRole::Reference),
            "field" => Ok(CorpusRole::Field),
            other => Err(Error::invalid(format!("unknown corpus role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_len_s: f64,
    pub hop_s: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_len_s: 1.0,
            hop_s: 0.5,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop_s > 0.0 && self.hop_s <= self.window_len_s) {
            return Err(Error::Config(format!(
                "window hop must satisfy 0 < hop ({}) <= window length ({})",
                self.hop_s, self.window_len_s
            )));
        }
        Ok(())
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_len_s * f64::from(sample_rate)).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        ((self.hop_s * f64::from(sample_rate)).round() as usize).max(1)
    }
}

/// One analysis window cut from a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedClip {
    pub window_id: String,
    pub recording_id: String,
    pub start_s: f64,
    pub sample_rate: u32,
    pub samples: Vec<f32>,
    pub corpus_role: CorpusRole,
    /// The recording was shorter than one window and was zero-padded.
    pub padded: bool,
}

pub fn window_id(recording_id: &str, index: usize) -> String {
    format!("{recording_id}_w{index:04}")
}

/// Decodes a RIFF/WAVE file holding 16-bit PCM or 32-bit IEEE float samples
/// in one or two channels. Stereo is averaged down to mono.
pub fn decode_wav(bytes: &[u8], recording_id: &str) -> Result<AudioClip> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound_error)?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels);
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedFormat(format!(
            "{channels} channels (only mono and stereo are accepted)"
        )));
    }
    if spec.sample_rate == 0 {
        return Err(Error::Decode("sample rate of zero".into()));
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound_error)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 }))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound_error)?,
        (format, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {format:?} samples (expected 16-bit PCM or 32-bit float)"
            )))
        }
    };

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|f| (f[0] + f[1]) * 0.5).collect()
    };
    Ok(AudioClip::new(recording_id, spec.sample_rate, samples))
}

fn map_hound_error(e: hound::Error) -> Error {
    match e {
        hound::Error::Unsupported => Error::UnsupportedFormat("codec not supported".into()),
        hound::Error::FormatError(msg) => Error::Decode(msg.to_string()),
        other => Error::Decode(other.to_string()),
    }
}

/// Encodes a clip as mono 16-bit PCM WAV.
pub fn encode_wav_pcm16(samples: &[f32], sample_rate: u32) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::with_capacity(44 + samples.len() * 2));
    {
        // Writing into memory cannot fail short of allocation failure.
        let mut writer = hound::WavWriter::new(&mut buf, spec).expect("in-memory wav header");
        for &s in samples {
            let v = (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).expect("in-memory wav sample");
        }
        writer.finalize().expect("in-memory wav finalize");
    }
    buf.into_inner()
}

/// Linear-interpolation resampling; output length is
/// `round(len * target_rate / sample_rate)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if clip.sample_rate == target_rate || clip.samples.is_empty() {
        return Ok(AudioClip::new(
            clip.recording_id.clone(),
            target_rate,
            clip.samples.clone(),
        ));
    }
    let n = clip.samples.len();
    let ratio = f64::from(clip.sample_rate) / f64::from(target_rate);
    let out_len = (n as f64 / ratio).round() as usize;
    let last = n - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = (pos - lo as f64).clamp(0.0, 1.0);
            let a = f64::from(clip.samples[lo]);
            let b = f64::from(clip.samples[hi]);
            (a + (b - a) * frac) as f32
        })
        .collect();
    Ok(AudioClip::new(clip.recording_id.clone(), target_rate, samples))
}

/// Number of full windows that fit in `n` samples.
pub fn window_count(n: usize, window: usize, hop: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / hop + 1
    }
}

/// Cuts a clip into overlapping windows. Partial trailing windows are
/// dropped; a clip shorter than one window yields a single zero-padded
/// window with `padded` set.
pub fn window(clip: &AudioClip, cfg: &WindowConfig, role: CorpusRole) -> Result<Vec<WindowedClip>> {
    cfg.validate()?;
    if clip.samples.is_empty() {
        return Err(Error::invalid(format!("recording `{}` is empty", clip.recording_id)));
    }
    let sr = clip.sample_rate;
    let wlen = cfg.window_samples(sr);
    let hop = cfg.hop_samples(sr);
    if wlen == 0 {
        return Err(Error::Config("window shorter than one sample".into()));
    }

    let make = |index: usize, start: usize, samples: Vec<f32>, padded: bool| WindowedClip {
        window_id: window_id(&clip.recording_id, index),
        recording_id: clip.recording_id.clone(),
        start_s: start as f64 / f64::from(sr),
        sample_rate: sr,
        samples,
        corpus_role: role,
        padded,
    };

    if clip.samples.len() < wlen {
        let mut samples = clip.samples.clone();
        samples.resize(wlen, 0.0);
        return Ok(vec![make(0, 0, samples, true)]);
    }
    let count = window_count(clip.samples.len(), wlen, hop);
    Ok((0..count)
        .map(|i| {
            let start = i * hop;
            make(i, start, clip.samples[start..start + wlen].to_vec(), false)
        })
        .collect())
}
