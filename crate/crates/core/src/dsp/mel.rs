//! HTK-scale triangular mel filterbank and log mel-spectrogram.

use super::stft::{self, BINS};
use super::{AudioBuffer, MelSpectrogram, N_MELS};
use crate::error::Result;

pub const F_MAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-10;

/// HTK mel scale: m = 2595·log10(1 + f/700).
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// 96 triangular filters over 257 bins, spanning 0–8000 Hz with 98
/// equally-mel-spaced edge points. Row-major [96 × 257].
pub fn mel_filterbank() -> Vec<f64> {
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(F_MAX);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    // Bin k sits at k·16000/512 Hz.
    let bin_hz: Vec<f64> = (0..BINS).map(|k| k as f64 * 16000.0 / 512.0).collect();

    let mut bank = vec![0.0; N_MELS * BINS];
    for m in 0..N_MELS {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for (k, &f) in bin_hz.iter().enumerate() {
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            bank[m * BINS + k] = rise.min(fall).max(0.0);
        }
    }
    bank
}

/// Filter edge frequencies in Hz (98 points), exposed for verification.
pub fn mel_edges() -> Vec<f64> {
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(F_MAX);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Log mel-spectrogram: |STFT|² projected through the filterbank, then
/// ln(x + 1e-10). Output is [96 mel bins × T frames].
pub fn log_mel(buffer: &AudioBuffer) -> Result<MelSpectrogram> {
    let spec = stft::stft(buffer)?;
    let bank = mel_filterbank();
    let frames = spec.frames;
    let mut values = vec![0.0; N_MELS * frames];
    for t in 0..frames {
        for m in 0..N_MELS {
            let row = &bank[m * BINS..(m + 1) * BINS];
            let mut acc = 0.0;
            for (k, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    acc += w * spec.power(t, k);
                }
            }
            values[m * frames + t] = (acc + LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(values, frames)
}
