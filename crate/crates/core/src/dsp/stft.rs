//! Short-time Fourier transform: 512-sample Hann window, hop 256, no centering.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::AudioBuffer;
use crate::error::{Error, Result};

pub const WINDOW: usize = 512;
pub const HOP: usize = 256;
pub const BINS: usize = WINDOW / 2 + 1;

/// Periodic Hann window w[n] = 0.5·(1 − cos(2πn/N)).
pub fn hann_window() -> Vec<f64> {
    (0..WINDOW)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos()))
        .collect()
}

/// Complex spectrogram: `frames` rows of [`BINS`] non-redundant bins.
pub struct ComplexSpectrogram {
    pub frames: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexSpectrogram {
    pub fn magnitude(&self, frame: usize, bin: usize) -> f64 {
        let i = frame * BINS + bin;
        (self.re[i] * self.re[i] + self.im[i] * self.im[i]).sqrt()
    }

    pub fn power(&self, frame: usize, bin: usize) -> f64 {
        let i = frame * BINS + bin;
        self.re[i] * self.re[i] + self.im[i] * self.im[i]
    }
}

/// Frame count for a buffer of `n` samples: floor((n − 512)/256) + 1.
pub fn frame_count(n: usize) -> Option<usize> {
    if n < WINDOW {
        None
    } else {
        Some((n - WINDOW) / HOP + 1)
    }
}

pub fn stft(buffer: &AudioBuffer) -> Result<ComplexSpectrogram> {
    let samples = buffer.samples();
    let frames = frame_count(samples.len()).ok_or_else(|| {
        Error::config(format!(
            "stft requires at least {WINDOW} samples, got {}",
            samples.len()
        ))
    })?;
    let window = hann_window();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(WINDOW);

    let mut re = vec![0.0; frames * BINS];
    let mut im = vec![0.0; frames * BINS];
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    for f in 0..frames {
        let start = f * HOP;
        for n in 0..WINDOW {
            buf[n] = Complex::new(samples[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..BINS {
            re[f * BINS + k] = buf[k].re;
            im[f * BINS + k] = buf[k].im;
        }
    }
    Ok(ComplexSpectrogram { frames, re, im })
}
