//! Mono 16-bit PCM WAV input.

use std::path::Path;

use crate::dsp::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Read a 16-bit PCM WAV file as a 16 kHz mono waveform.
///
/// Without `resample`, multi-channel or non-16 kHz files are rejected. With
/// it, channels are averaged and the signal is linearly resampled.
pub fn read_wav(path: impl AsRef<Path>, utterance_id: &str, resample: bool) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let corrupt = |m: String| Error::CorruptWaveform(format!("{}: {m}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(|e| corrupt(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(corrupt("expected 16-bit signed PCM".into()));
    }
    if !resample && (spec.channels != 1 || spec.sample_rate != DEFAULT_SAMPLE_RATE) {
        return Err(corrupt(format!(
            "{} channel(s) at {} Hz; pass --resample to convert",
            spec.channels, spec.sample_rate
        )));
    }
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| corrupt(e.to_string()))?;
    let channels = spec.channels.max(1) as usize;
    let mono: Vec<f32> = raw
        .chunks(channels)
        .map(|c| c.iter().map(|&s| s as f32 / 32768.0).sum::<f32>() / c.len() as f32)
        .collect();
    let samples = if spec.sample_rate == DEFAULT_SAMPLE_RATE {
        mono
    } else {
        linear_resample(&mono, spec.sample_rate, DEFAULT_SAMPLE_RATE)
    };
    Waveform::new(samples, DEFAULT_SAMPLE_RATE, utterance_id)
}

pub fn linear_resample(input: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if input.is_empty() || from_hz == to_hz {
        return input.to_vec();
    }
    let out_len = ((input.len() as u64 * to_hz as u64) / from_hz as u64).max(1) as usize;
    let step = from_hz as f64 / to_hz as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = pos.floor() as usize;
            let frac = (pos - lo as f64) as f32;
            let a = input[lo.min(input.len() - 1)];
            let b = input[(lo + 1).min(input.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in &wave.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(io)?;
    }
    w.finalize().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.25; 1600], 16000, "a").unwrap();
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p, "a", false).unwrap();
        assert_eq!(back.samples.len(), 1600);
        assert!((back.samples[0] - 0.25).abs() < 1e-4);

        let p8 = dir.path().join("b.wav");
        write_wav(&p8, &Waveform::new(vec![0.1; 800], 8000, "b").unwrap()).unwrap();
        assert!(matches!(read_wav(&p8, "b", false), Err(Error::CorruptWaveform(_))));
        assert_eq!(read_wav(&p8, "b", true).unwrap().samples.len(), 1600);
    }

    #[test]
    fn resample_preserves_linear_ramps() {
        let ramp: Vec<f32> = (0..100).map(|i| i as f32).collect();
        let up = linear_resample(&ramp, 8000, 16000);
        assert_eq!(up.len(), 200);
        assert!((up[3] - 1.5).abs() < 1e-6);
    }
}
