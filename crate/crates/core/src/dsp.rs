//! Log-mel front end and energy voice activity detection.
//!
//! Frames start at sample 0 and advance by the shift; a trailing partial
//! window is dropped. Each frame is Hamming-windowed, zero-padded to the next
//! power of two, and its power spectrum is pooled by 40 triangular mel
//! filters spanning 20 Hz to 8 kHz.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::span::Span;

pub const MEL_BANDS: usize = 40;
pub const WINDOW_MS: usize = 25;
pub const FRAME_SHIFT_MS: usize = 10;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const LOG_FLOOR: f64 = 1e-10;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 8000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub utterance_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32, utterance_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::CorruptWaveform("no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::CorruptWaveform("zero sample rate".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::CorruptWaveform(format!(
                "sample {i} is {} (must be finite and within [-1, 1])",
                samples[i]
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn window_samples(&self) -> usize {
        self.sample_rate_hz as usize * WINDOW_MS / 1000
    }

    pub fn shift_samples(&self) -> usize {
        self.sample_rate_hz as usize * FRAME_SHIFT_MS / 1000
    }
}

/// Row-major `frames x bands` log energies.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Vec<f32>,
    frames: usize,
    bands: usize,
    pub utterance_id: String,
}

impl Spectrogram {
    pub fn from_values(
        frames: usize,
        bands: usize,
        values: Vec<f32>,
        utterance_id: impl Into<String>,
    ) -> Result<Self> {
        if frames == 0 || bands == 0 {
            return Err(Error::Shape(format!("spectrogram must be non-empty ({frames}x{bands})")));
        }
        if values.len() != frames * bands {
            return Err(Error::Shape(format!(
                "spectrogram {frames}x{bands} needs {} values, got {}",
                frames * bands,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("spectrogram contains non-finite values".into()));
        }
        Ok(Spectrogram {
            values,
            frames,
            bands,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.bands..(t + 1) * self.bands]
    }

    pub fn get(&self, t: usize, band: usize) -> f32 {
        self.values[t * self.bands + band]
    }

    /// Frames `[span.start, span.end)` as a new spectrogram.
    pub fn slice(&self, span: Span) -> Result<Spectrogram> {
        if span.end > self.frames || span.is_empty() {
            return Err(Error::SegmentOutOfBounds {
                start: span.start,
                end: span.end,
                frames: self.frames,
            });
        }
        Ok(Spectrogram {
            values: self.values[span.start * self.bands..span.end * self.bands].to_vec(),
            frames: span.len(),
            bands: self.bands,
            utterance_id: self.utterance_id.clone(),
        })
    }

    /// Mean log energy of each frame.
    pub fn frame_energies(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|t| self.frame(t).iter().map(|&v| v as f64).sum::<f64>() / self.bands as f64)
            .collect()
    }
}

/// One speech flag per spectrogram frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VadMask {
    pub flags: Vec<bool>,
}

impl VadMask {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }
}

pub fn frame_count(samples: usize, window: usize, shift: usize) -> usize {
    if samples < window || shift == 0 {
        0
    } else {
        1 + (samples - window) / shift
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, evaluated at each FFT bin frequency.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `bands x bins`, row-major.
    weights: Vec<f64>,
    bands: usize,
    bins: usize,
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(bands: usize, n_fft: usize, sample_rate_hz: u32, low_hz: f64, high_hz: f64) -> Self {
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
        let edges_hz: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = sample_rate_hz as f64 / n_fft as f64;
        let mut weights = vec![0.0; bands * bins];
        for b in 0..bands {
            let (l, c, r) = (edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[b * bins + k] = w;
            }
        }
        MelFilterbank {
            weights,
            bands,
            bins,
            edges_hz,
        }
    }

    pub fn for_sample_rate(sample_rate_hz: u32) -> Self {
        let window = sample_rate_hz as usize * WINDOW_MS / 1000;
        Self::new(
            MEL_BANDS,
            window.next_power_of_two(),
            sample_rate_hz,
            MEL_LOW_HZ,
            MEL_HIGH_HZ.min(sample_rate_hz as f64 / 2.0),
        )
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.edges_hz[band + 1]
    }

    pub fn weight(&self, band: usize, bin: usize) -> f64 {
        self.weights[band * self.bins + bin]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (b, o) in out.iter_mut().enumerate() {
            let row = &self.weights[b * self.bins..(b + 1) * self.bins];
            *o = row.iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

pub fn compute_spectrogram(waveform: &Waveform) -> Result<Spectrogram> {
    if waveform.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::CorruptWaveform("non-finite samples".into()));
    }
    let window = waveform.window_samples();
    let shift = waveform.shift_samples();
    let n = waveform.samples.len();
    if n < window || window == 0 {
        return Err(Error::UtteranceTooShort { samples: n, window });
    }
    let frames = frame_count(n, window, shift);
    let n_fft = window.next_power_of_two();
    let bank = MelFilterbank::for_sample_rate(waveform.sample_rate_hz);
    let win = hamming(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bank.bins()];
    let mut energies = vec![0.0; MEL_BANDS];
    let mut values = Vec::with_capacity(frames * MEL_BANDS);
    for f in 0..frames {
        let start = f * shift;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < window {
                Complex::new(waveform.samples[start + i] as f64 * win[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        bank.apply(&power, &mut energies);
        values.extend(energies.iter().map(|&e| e.max(LOG_FLOOR).ln() as f32));
    }
    Spectrogram::from_values(frames, MEL_BANDS, values, waveform.utterance_id.clone())
}

/// Subtract the scalar mean over all cells.
pub fn mean_normalize(spec: &Spectrogram) -> Spectrogram {
    let mean = spec.values.iter().map(|&v| v as f64).sum::<f64>() / spec.values.len() as f64;
    Spectrogram {
        values: spec.values.iter().map(|&v| (v as f64 - mean) as f32).collect(),
        frames: spec.frames,
        bands: spec.bands,
        utterance_id: spec.utterance_id.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VadConfig {
    /// Nearest-rank percentile of frame energies used as the noise floor.
    pub percentile: f64,
    /// Nats above the floor a frame must exceed to count as speech.
    pub margin: f64,
    /// Odd median-filter width applied to the raw decisions.
    pub median_width: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            percentile: 10.0,
            margin: 2.0,
            median_width: 5,
        }
    }
}

fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn compute_vad(spec: &Spectrogram) -> VadMask {
    compute_vad_with(spec, &VadConfig::default())
}

pub fn compute_vad_with(spec: &Spectrogram, cfg: &VadConfig) -> VadMask {
    let energy = spec.frame_energies();
    let mut sorted = energy.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = nearest_rank(&sorted, cfg.percentile) + cfg.margin;
    let raw: Vec<bool> = energy.iter().map(|&e| e > threshold).collect();
    VadMask {
        flags: median_smooth(&raw, cfg.median_width),
    }
}

/// Majority over a centered window truncated at the edges; an even split
/// keeps the raw decision.
fn median_smooth(raw: &[bool], width: usize) -> Vec<bool> {
    let half = width / 2;
    (0..raw.len())
        .map(|t| {
            let window = &raw[t.saturating_sub(half)..(t + half + 1).min(raw.len())];
            let votes = window.iter().filter(|f| **f).count();
            match (2 * votes).cmp(&window.len()) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => raw[t],
            }
        })
        .collect()
}

fn check_span(span: Span, mask: &VadMask) -> Result<()> {
    if span.end > mask.len() || span.is_empty() {
        return Err(Error::SegmentOutOfBounds {
            start: span.start,
            end: span.end,
            frames: mask.len(),
        });
    }
    Ok(())
}

pub fn silence_fraction(span: Span, mask: &VadMask) -> Result<f64> {
    check_span(span, mask)?;
    let silent = mask.flags[span.start..span.end].iter().filter(|f| !**f).count();
    Ok(silent as f64 / span.len() as f64)
}

pub fn speech_fraction(span: Span, mask: &VadMask) -> Result<f64> {
    Ok(1.0 - silence_fraction(span, mask)?)
}
