//! Audio ingestion and log mel-spectrogram computation.
//!
//! Preprocessing is fixed: 16 kHz mono, 512-sample Hann window with 50%
//! overlap, 96 mel bins over 0–8000 Hz, natural-log compression.

mod cache;
pub mod mel;
pub mod stft;
mod wav;

pub use cache::{load_mel_cache, save_mel_cache};
pub use mel::{log_mel, mel_filterbank};
pub use stft::{frame_count, hann_window, stft, ComplexSpectrogram};
pub use wav::{load_wav, save_wav};

use crate::error::{Error, Result};

/// Target sample rate for every input representation.
pub const SAMPLE_RATE: u32 = 16_000;
/// Mel bins per spectrogram.
pub const N_MELS: usize = 96;
/// Spectrogram chunk length in frames (≈4.1 s).
pub const SPEC_CHUNK_FRAMES: usize = 256;
/// Raw-audio chunk length in samples (≈4.1 s).
pub const RAW_CHUNK_SAMPLES: usize = 65_610;

/// Mono audio in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::config("audio buffer is empty"));
        }
        Ok(AudioBuffer { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Time-indexed log mel-spectrogram, row-major [96 mel bins × T frames].
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    frames: usize,
    /// Hop length in seconds (256 / 16000).
    pub frame_hop_seconds: f64,
}

impl MelSpectrogram {
    pub fn new(values: Vec<f64>, frames: usize) -> Result<Self> {
        if frames == 0 || values.len() != N_MELS * frames {
            return Err(Error::shape(format!(
                "mel spectrogram needs {N_MELS}×{frames} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite mel spectrogram value".into()));
        }
        Ok(MelSpectrogram {
            values,
            frames,
            frame_hop_seconds: stft::HOP as f64 / SAMPLE_RATE as f64,
        })
    }

    /// Row-major [96 × frames] buffer.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn at(&self, mel_bin: usize, frame: usize) -> f64 {
        self.values[mel_bin * self.frames + frame]
    }
}

/// Linear-interpolation resampling to `target_rate`.
/// Output length is floor(n · target/src); the same rate returns a copy.
pub fn resample(buffer: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::config("resample target rate must be positive"));
    }
    if target_rate == buffer.sample_rate {
        return Ok(buffer.clone());
    }
    let src = buffer.samples();
    let n_out = (src.len() as u64 * target_rate as u64 / buffer.sample_rate as u64) as usize;
    if n_out == 0 {
        return Err(Error::config(format!(
            "resampling {} samples to {target_rate} Hz leaves nothing",
            src.len()
        )));
    }
    let ratio = buffer.sample_rate as f64 / target_rate as f64;
    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let pos = i as f64 * ratio;
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        let a = src[i0.min(src.len() - 1)];
        let b = src[(i0 + 1).min(src.len() - 1)];
        out.push(a * (1.0 - frac) + b * frac);
    }
    AudioBuffer::new(out, target_rate)
}

/// Contiguous `length`-frame slice of a spectrogram starting at `offset`.
pub fn chunk_spec(spec: &MelSpectrogram, length: usize, offset: usize) -> Result<MelSpectrogram> {
    if offset + length > spec.frames || length == 0 {
        return Err(Error::config(format!(
            "spectrogram chunk [{offset}, {offset}+{length}) exceeds {} frames",
            spec.frames
        )));
    }
    let mut values = Vec::with_capacity(N_MELS * length);
    for m in 0..N_MELS {
        let row = &spec.values[m * spec.frames..(m + 1) * spec.frames];
        values.extend_from_slice(&row[offset..offset + length]);
    }
    MelSpectrogram::new(values, length)
}

/// Contiguous `length`-sample slice of raw audio starting at `offset`.
pub fn chunk_raw(buffer: &AudioBuffer, length: usize, offset: usize) -> Result<AudioBuffer> {
    if offset + length > buffer.samples.len() || length == 0 {
        return Err(Error::config(format!(
            "audio chunk [{offset}, {offset}+{length}) exceeds {} samples",
            buffer.samples.len()
        )));
    }
    AudioBuffer::new(
        buffer.samples[offset..offset + length].to_vec(),
        buffer.sample_rate,
    )
}

/// Number of non-overlapping evaluation chunks in `total` units.
pub fn eval_chunk_count(total: usize, chunk_len: usize) -> usize {
    total / chunk_len
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_same_rate_is_identity() {
        let buf = AudioBuffer::new(vec![0.1, -0.2, 0.3], 16000).unwrap();
        let out = resample(&buf, 16000).unwrap();
        assert_eq!(out, buf);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let buf = AudioBuffer::new(vec![0.42; 1000], 44100).unwrap();
        let out = resample(&buf, 16000).unwrap();
        assert_eq!(out.len(), 1000 * 16000 / 44100);
        assert!(out.samples().iter().all(|&s| (s - 0.42).abs() < 1e-12));
    }

    #[test]
    fn resample_rejects_zero_rate() {
        let buf = AudioBuffer::new(vec![0.0; 10], 16000).unwrap();
        assert!(matches!(resample(&buf, 0), Err(Error::Config(_))));
    }

    #[test]
    fn downsampled_sine_keeps_its_peak_bin() {
        // 1 kHz sine at 32 kHz → 16 kHz; a 512-point DFT on the result must
        // still peak at bin 32 (= 1000/16000·512).
        let n = 8192;
        let samples: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 32000.0).sin())
            .collect();
        let buf = AudioBuffer::new(samples, 32000).unwrap();
        let down = resample(&buf, 16000).unwrap();
        assert_eq!(down.sample_rate(), 16000);

        let seg = &down.samples()[..512];
        let mut best = (0usize, 0.0f64);
        for k in 0..257 {
            let mut re = 0.0;
            let mut im = 0.0;
            for (t, &x) in seg.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * k as f64 * t as f64 / 512.0;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            let mag = (re * re + im * im).sqrt();
            if mag > best.1 {
                best = (k, mag);
            }
        }
        assert_eq!(best.0, 32);
    }

    #[test]
    fn chunking_trivial_cases() {
        let samples: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let buf = AudioBuffer::new(samples.clone(), 16000).unwrap();
        // Exact-length source at offset 0 reproduces the source.
        let full = chunk_raw(&buf, 1000, 0).unwrap();
        assert_eq!(full.samples(), buf.samples());
        // A random-offset slice matches direct indexing.
        let piece = chunk_raw(&buf, 100, 321).unwrap();
        assert_eq!(piece.samples(), &samples[321..421]);
        // Too-long chunk reports both lengths.
        let err = chunk_raw(&buf, 2000, 0).unwrap_err().to_string();
        assert!(err.contains("2000") && err.contains("1000"), "{err}");
    }

    #[test]
    fn spec_chunks_concatenate_back_to_the_truncated_source() {
        let frames = 1024 + 37;
        let values: Vec<f64> = (0..N_MELS * frames).map(|i| (i % 251) as f64 * 0.01).collect();
        let spec = MelSpectrogram::new(values, frames).unwrap();
        assert_eq!(eval_chunk_count(1024, 256), 4);
        assert_eq!(eval_chunk_count(spec.frames(), 256), 4);
        for c in 0..4 {
            let chunk = chunk_spec(&spec, 256, c * 256).unwrap();
            for m in 0..N_MELS {
                for t in 0..256 {
                    assert_eq!(chunk.at(m, t), spec.at(m, c * 256 + t));
                }
            }
        }
    }
}
