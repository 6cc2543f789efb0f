//! Seeded synthetic corpora: harmonic chirp "calls", broadband noise events
//! and white or pink background noise, with ground truth.
//!
//! A call is a train of notes. Each note is a linear chirp with a Hann
//! envelope and a stack of harmonics; successive notes are transposed by a
//! fixed frequency ratio. Noise events are Hann-shaped bursts of band-limited
//! white noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{detector_score, DetectorConfig, MelConfig, SpectrogramExtractor, StftConfig};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, jsonl_bytes};
use crate::ingest::{encode_wav_pcm16, window, AudioClip, CorpusRole, WindowConfig, PIPELINE_SAMPLE_RATE};
use crate::triage::truth_csv;

/// Peak level of a generated call before mixing.
const CALL_PEAK: f64 = 0.5;
const MAX_PLACEMENT_ATTEMPTS: usize = 32;
/// Fraction of the Nyquist frequency above which harmonics are dropped.
const HARMONIC_CEILING: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    #[default]
    Pink,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            other => Err(Error::invalid(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Note-train call template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallKind {
    /// Fundamental at the start and end of the first note.
    pub f0_hz: f64,
    pub f1_hz: f64,
    pub note_s: f64,
    pub gap_s: f64,
    pub notes: usize,
    /// Frequency ratio between consecutive notes.
    pub note_step: f64,
    pub harmonics: usize,
    /// Amplitude ratio between consecutive harmonics.
    pub harmonic_decay: f64,
}

impl CallKind {
    pub fn duration_s(&self) -> f64 {
        self.notes as f64 * self.note_s + self.notes.saturating_sub(1) as f64 * self.gap_s
    }

    /// Highest fundamental reached by any note.
    fn highest_hz(&self) -> f64 {
        self.f0_hz.max(self.f1_hz) * self.note_step.max(1.0).powi(self.notes.saturating_sub(1) as i32)
    }

    fn jittered(&self, rng: &mut impl Rng, jitter: f64) -> CallKind {
        let mut j = |v: f64| v * (1.0 + rng.random_range(-jitter..=jitter));
        CallKind {
            f0_hz: j(self.f0_hz),
            f1_hz: j(self.f1_hz),
            note_s: j(self.note_s),
            gap_s: j(self.gap_s),
            ..*self
        }
    }
}

/// Three call types that clear the field detector at 10 dB SNR and the
/// reference detector at 40 dB.
pub fn default_call_kinds() -> Vec<CallKind> {
    vec![
        CallKind {
            f0_hz: 345.0,
            f1_hz: 1560.0,
            note_s: 0.075,
            gap_s: 0.1,
            notes: 6,
            note_step: 0.87,
            harmonics: 7,
            harmonic_decay: 1.0,
        },
        CallKind {
            f0_hz: 695.0,
            f1_hz: 152.0,
            note_s: 0.143,
            gap_s: 0.061,
            notes: 6,
            note_step: 1.32,
            harmonics: 7,
            harmonic_decay: 1.0,
        },
        CallKind {
            f0_hz: 526.0,
            f1_hz: 1498.0,
            note_s: 0.342,
            gap_s: 0.049,
            notes: 3,
            note_step: 0.87,
            harmonics: 7,
            harmonic_decay: 0.885,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub sample_rate: u32,
    pub n_reference: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub recording_len_s: f64,
    pub call_kinds: Vec<CallKind>,
    /// Relative random variation of call frequencies and durations.
    pub jitter: f64,
    pub noise: NoiseKind,
    /// Call power over its duration relative to background noise power.
    pub snr_db: f64,
    /// Background level of reference recordings; infinite means silence.
    pub reference_snr_db: f64,
    /// Inclusive range of calls per positive field recording.
    pub calls_per_positive: (usize, usize),
    pub calls_per_reference: (usize, usize),
    /// Inclusive range of noise events per negative field recording.
    pub events_per_negative: (usize, usize),
    /// Fraction of reference recordings holding noise events instead of calls.
    pub reference_noise_fraction: f64,
    /// Noise event power relative to a call of the same duration.
    pub event_level_db: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate: PIPELINE_SAMPLE_RATE,
            n_reference: 40,
            n_positive: 30,
            n_negative: 30,
            recording_len_s: 6.0,
            call_kinds: default_call_kinds(),
            jitter: 0.1,
            noise: NoiseKind::Pink,
            snr_db: 10.0,
            reference_snr_db: 40.0,
            calls_per_positive: (2, 3),
            calls_per_reference: (2, 3),
            events_per_negative: (1, 3),
            reference_noise_fraction: 0.25,
            event_level_db: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.recording_len_s <= 0.0 {
            return Err(Error::invalid("sample rate and recording length must be positive"));
        }
        if self.call_kinds.is_empty() {
            return Err(Error::invalid("at least one call kind is required"));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        for k in &self.call_kinds {
            if k.notes == 0 || k.harmonics == 0 || k.note_s <= 0.0 || k.gap_s < 0.0 {
                return Err(Error::invalid(
                    "call kinds need notes, harmonics and positive durations",
                ));
            }
            if k.highest_hz() * (1.0 + self.jitter) >= HARMONIC_CEILING * nyquist {
                return Err(Error::invalid(format!(
                    "call fundamental reaches {:.0} Hz, too close to Nyquist {nyquist} Hz",
                    k.highest_hz() * (1.0 + self.jitter)
                )));
            }
            if k.duration_s() * (1.0 + self.jitter) >= self.recording_len_s {
                return Err(Error::invalid("calls must be shorter than the recording"));
            }
        }
        let ranges = [
            self.calls_per_positive,
            self.calls_per_reference,
            self.events_per_negative,
        ];
        if ranges.iter().any(|r| r.0 > r.1) || self.calls_per_positive.0 < 2 {
            return Err(Error::invalid(
                "event count ranges must be ordered, positives need at least 2 calls",
            ));
        }
        if !(0.0..=1.0).contains(&self.reference_noise_fraction) || !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::invalid(
                "reference_noise_fraction must lie in [0, 1] and jitter in [0, 0.5)",
            ));
        }
        if self.snr_db.is_nan() || self.reference_snr_db.is_nan() {
            return Err(Error::invalid("SNR must not be NaN"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Call,
    Noise,
}

/// Placement of one generated event, in seconds from the recording start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub recording_id: String,
    pub corpus_role: CorpusRole,
    pub kind: EventKind,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub reference: Vec<AudioClip>,
    pub field: Vec<AudioClip>,
    pub truth: BTreeMap<String, bool>,
    pub events: Vec<EventAnnotation>,
}

/// Linear chirp from `f0` to `f1` under a Hann envelope, with a seeded
/// starting phase. Peak amplitude is at most 1.
pub fn gen_call(seed: u64, f0: f64, f1: f64, dur_s: f64, sample_rate: u32) -> Result<AudioClip> {
    let nyquist = f64::from(sample_rate) / 2.0;
    if f0 >= nyquist || f1 >= nyquist || f0 < 0.0 || f1 < 0.0 {
        return Err(Error::invalid(format!("chirp {f0}-{f1} Hz outside [0, {nyquist}) Hz")));
    }
    if !(dur_s > 0.0) {
        return Err(Error::invalid("chirp duration must be positive"));
    }
    let phase = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..2.0 * PI);
    let samples = chirp_stack(f0, f1, dur_s, sample_rate, 1, 1.0, phase)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Ok(AudioClip::new(format!("call_{seed}"), sample_rate, samples))
}

fn hann_at(i: usize, n: usize) -> f64 {
    if n < 2 {
        return 1.0;
    }
    0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()
}

/// Hann-enveloped harmonic chirp. Harmonics that would pass
/// [`HARMONIC_CEILING`] of the Nyquist frequency are left out.
fn chirp_stack(f0: f64, f1: f64, dur_s: f64, sample_rate: u32, harmonics: usize, decay: f64, phase0: f64) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let ceiling = HARMONIC_CEILING * sr / 2.0;
    let harmonics = harmonics.min((ceiling / f0.max(f1)).floor().max(1.0) as usize);
    let n = (dur_s * sr).round() as usize;
    let rate = (f1 - f0) / dur_s;
    let weight_sum: f64 = (0..harmonics).map(|h| decay.powi(h as i32)).sum();
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let phase = 2.0 * PI * (f0 * t + 0.5 * rate * t * t) + phase0;
            let v: f64 = (0..harmonics)
                .map(|h| decay.powi(h as i32) * ((h + 1) as f64 * phase).sin())
                .sum();
            hann_at(i, n) * v / weight_sum
        })
        .collect()
}

/// Renders one call of `kind`, peak-normalised to [`CALL_PEAK`].
pub fn render_call(kind: &CallKind, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let gap = vec![0.0; (kind.gap_s * f64::from(sample_rate)).round() as usize];
    let mut out = Vec::new();
    for note in 0..kind.notes {
        let shift = kind.note_step.powi(note as i32);
        let phase = rng.random_range(0.0..2.0 * PI);
        out.extend(chirp_stack(
            kind.f0_hz * shift,
            kind.f1_hz * shift,
            kind.note_s,
            sample_rate,
            kind.harmonics,
            kind.harmonic_decay,
            phase,
        ));
        if note + 1 < kind.notes {
            out.extend_from_slice(&gap);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= CALL_PEAK / peak);
    }
    out
}

fn white(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Unit-RMS background noise.
pub fn background(kind: NoiseKind, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w = white(n, rng);
    let mut out = match kind {
        NoiseKind::White => w,
        NoiseKind::Pink => {
            // Paul Kellet's economy filter, -3 dB/octave within about 0.05 dB
            let mut b = [0.0f64; 7];
            w.iter()
                .map(|&x| {
                    b[0] = 0.99886 * b[0] + x * 0.055_517_9;
                    b[1] = 0.99332 * b[1] + x * 0.075_075_9;
                    b[2] = 0.96900 * b[2] + x * 0.153_852_0;
                    b[3] = 0.86650 * b[3] + x * 0.310_485_6;
                    b[4] = 0.55000 * b[4] + x * 0.532_952_2;
                    b[5] = -0.7616 * b[5] - x * 0.016_898_0;
                    let y = b[..6].iter().sum::<f64>() + b[6] + x * 0.5362;
                    b[6] = x * 0.115_926;
                    y
                })
                .collect()
        }
    };
    let rms = rms(&out);
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Hann-enveloped burst of white noise band-limited to `[lo_hz, hi_hz]`.
fn noise_event(dur_s: f64, lo_hz: f64, hi_hz: f64, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    use rustfft::{num_complex::Complex, FftPlanner};
    let n = (dur_s * f64::from(sample_rate)).round() as usize;
    let mut buf: Vec<Complex<f64>> = white(n, rng).into_iter().map(|v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = f64::from(sample_rate) / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * df;
        if f < lo_hz || f > hi_hz {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().enumerate().map(|(i, c)| c.re * hann_at(i, n)).collect()
}

/// Non-overlapping onsets for events of the given lengths within `total`
/// samples, separated by at least `min_gap` samples.
fn place(lengths: &[usize], total: usize, min_gap: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
    let busy: usize = lengths.iter().sum::<usize>() + min_gap * lengths.len().saturating_sub(1);
    let slack = total.checked_sub(busy)?;
    // distribute the slack as random gaps: sorted uniform cut points
    let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut onsets = Vec::with_capacity(lengths.len());
    let mut used = 0;
    for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        let onset = cut + used + i * min_gap;
        onsets.push(onset);
        used += len;
    }
    Some(onsets)
}

struct Mixer<'a> {
    spec: &'a SynthSpec,
    extractor: SpectrogramExtractor,
    detector: DetectorConfig,
}

impl Mixer<'_> {
    fn len(&self) -> usize {
        (self.spec.recording_len_s * f64::from(self.spec.sample_rate)).round() as usize
    }

    fn secs(&self, samples: usize) -> f64 {
        samples as f64 / f64::from(self.spec.sample_rate)
    }

    /// Mixes events onto a background whose RMS is `10^(-snr/20)` times the
    /// mean call RMS.
    fn mix(
        &self,
        id: &str,
        role: CorpusRole,
        events: &[(EventKind, Vec<f64>)],
        snr_db: f64,
        rng: &mut ChaCha8Rng,
    ) -> Option<(AudioClip, Vec<EventAnnotation>)> {
        let n = self.len();
        let lengths: Vec<usize> = events.iter().map(|e| e.1.len()).collect();
        let min_gap = (0.25 * f64::from(self.spec.sample_rate)) as usize;
        let onsets = place(&lengths, n, min_gap, rng)?;
        let noise_gain = if snr_db.is_finite() {
            nominal_call_rms(self.spec) * 10f64.powf(-snr_db / 20.0)
        } else {
            0.0
        };
        let mut x = if noise_gain > 0.0 {
            background(self.spec.noise, n, rng)
                .into_iter()
                .map(|v| v * noise_gain)
                .collect()
        } else {
            vec![0.0; n]
        };
        let mut notes = Vec::with_capacity(events.len());
        for ((kind, ev), &onset) in events.iter().zip(&onsets) {
            x[onset..onset + ev.len()].iter_mut().zip(ev).for_each(|(o, v)| *o += v);
            notes.push(EventAnnotation {
                recording_id: id.to_string(),
                corpus_role: role,
                kind: *kind,
                start_s: self.secs(onset),
                end_s: self.secs(onset + ev.len()),
            });
        }
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 1.0 {
            x.iter_mut().for_each(|v| *v /= peak);
        }
        let clip = AudioClip::new(id, self.spec.sample_rate, x.into_iter().map(|v| v as f32).collect());
        Some((clip, notes))
    }

    fn passing_windows(&self, clip: &AudioClip) -> Result<usize> {
        let windows = window(clip, &WindowConfig::default(), CorpusRole::Field)?;
        let specs = self.extractor.batch(&windows)?;
        Ok(specs
            .iter()
            .filter(|s| self.detector.keeps(CorpusRole::Field, detector_score(s)))
            .count())
    }

    fn calls(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<(EventKind, Vec<f64>)> {
        (0..count)
            .map(|_| {
                let kind = self.spec.call_kinds[rng.random_range(0..self.spec.call_kinds.len())];
                let kind = kind.jittered(rng, self.spec.jitter);
                (EventKind::Call, render_call(&kind, self.spec.sample_rate, rng))
            })
            .collect()
    }

    fn noise_events(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<(EventKind, Vec<f64>)> {
        let level = nominal_call_rms(self.spec) * 10f64.powf(self.spec.event_level_db / 20.0);
        (0..count)
            .map(|_| {
                let dur = rng.random_range(0.1..0.5);
                let lo = rng.random_range(200.0..6000.0);
                let hi = lo * rng.random_range(1.3..2.5);
                let ev = noise_event(dur, lo, hi, self.spec.sample_rate, rng);
                let gain = level / rms(&ev).max(f64::MIN_POSITIVE);
                (EventKind::Noise, ev.into_iter().map(|v| v * gain).collect())
            })
            .collect()
    }
}

/// RMS of a call rendered from the first call kind without jitter, the level
/// reference for `snr_db`.
pub fn nominal_call_rms(spec: &SynthSpec) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    rms(&render_call(&spec.call_kinds[0], spec.sample_rate, &mut rng))
}

fn count_in(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.random_range(range.0..=range.1)
}

fn stream(seed: u64, role: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role << 32 | index as u64);
    rng
}

/// Builds reference and field corpora with ground truth.
///
/// Positive field recordings are regenerated with fresh placements until at
/// least two of their windows pass the field detector.
pub fn gen_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mixer = Mixer {
        spec,
        extractor: SpectrogramExtractor::new(StftConfig::default(), MelConfig::default(), spec.sample_rate)?,
        detector: DetectorConfig::default(),
    };
    let no_fit = |id: &str| Error::invalid(format!("events do not fit into {id}; lengthen recording_len_s"));

    let reference: Vec<Result<(AudioClip, Vec<EventAnnotation>)>> = crate::par::map_range(spec.n_reference, |i| {
        let id = format!("ref_{i:04}");
        let mut rng = stream(spec.seed, 1, i);
        let noisy = rng.random::<f64>() < spec.reference_noise_fraction;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let events = if noisy {
                mixer.noise_events(count_in(&mut rng, spec.calls_per_reference), &mut rng)
            } else {
                mixer.calls(count_in(&mut rng, spec.calls_per_reference), &mut rng)
            };
            if let Some(out) = mixer.mix(&id, CorpusRole::Reference, &events, spec.reference_snr_db, &mut rng) {
                return Ok(out);
            }
        }
        Err(no_fit(&id))
    });

    // field recordings: shuffled order of positives and negatives
    let mut order: Vec<bool> = std::iter::repeat_n(true, spec.n_positive)
        .chain(std::iter::repeat_n(false, spec.n_negative))
        .collect();
    let mut shuffle_rng = stream(spec.seed, 2, 0);
    for i in (1..order.len()).rev() {
        order.swap(i, shuffle_rng.random_range(0..=i));
    }
    let field: Vec<Result<(AudioClip, Vec<EventAnnotation>)>> = crate::par::map_range(order.len(), |i| {
        let id = format!("field_{i:04}");
        let mut rng = stream(spec.seed, 3, i);
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let events = if order[i] {
                mixer.calls(count_in(&mut rng, spec.calls_per_positive), &mut rng)
            } else {
                mixer.noise_events(count_in(&mut rng, spec.events_per_negative), &mut rng)
            };
            let Some((clip, notes)) = mixer.mix(&id, CorpusRole::Field, &events, spec.snr_db, &mut rng) else {
                continue;
            };
            if !order[i] || spec.snr_db < 10.0 || mixer.passing_windows(&clip)? >= 2 {
                return Ok((clip, notes));
            }
        }
        Err(Error::invalid(format!(
            "{id}: no placement gave two windows above the field detector threshold"
        )))
    });

    let mut corpus = SynthCorpus {
        reference: Vec::new(),
        field: Vec::new(),
        truth: BTreeMap::new(),
        events: Vec::new(),
    };
    for r in reference {
        let (clip, notes) = r?;
        corpus.reference.push(clip);
        corpus.events.extend(notes);
    }
    for (r, &positive) in field.into_iter().zip(&order) {
        let (clip, notes) = r?;
        corpus.truth.insert(clip.recording_id.clone(), positive);
        corpus.field.push(clip);
        corpus.events.extend(notes);
    }
    Ok(corpus)
}

/// Writes `<reference_dir>/<id>.wav`, `<field_dir>/<id>.wav`, the truth CSV
/// and an events JSONL file.
pub fn write_corpus(
    corpus: &SynthCorpus,
    reference_dir: &Path,
    field_dir: &Path,
    truth_path: &Path,
    events_path: &Path,
) -> Result<()> {
    std::fs::create_dir_all(reference_dir)?;
    std::fs::create_dir_all(field_dir)?;
    for (dir, clips) in [(reference_dir, &corpus.reference), (field_dir, &corpus.field)] {
        for clip in clips {
            let path = dir.join(format!("{}.wav", clip.recording_id));
            atomic_write(&path, &encode_wav_pcm16(&clip.samples, clip.sample_rate))?;
        }
    }
    atomic_write(truth_path, truth_csv(&corpus.truth).as_bytes())?;
    atomic_write(events_path, &jsonl_bytes(&corpus.events)?)?;
    Ok(())
}
