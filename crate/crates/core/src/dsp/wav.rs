//! Minimal PCM WAV reader/writer.
//!
//! Reads 8/16/24-bit integer and 32-bit float PCM, any channel count
//! (averaged to mono), and writes 16-bit mono.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::AudioBuffer;
use crate::error::{Error, Result};

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Loads a PCM WAV file as a mono buffer scaled to [−1, 1].
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedWav(format!(
            "{}: missing RIFF/WAVE header",
            path.display()
        )));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(&bytes, off + 4) as usize;
        let body_start = off + 8;
        if body_start + size > bytes.len() {
            return Err(Error::MalformedWav(format!(
                "{}: chunk `{}` overruns file",
                path.display(),
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::MalformedWav(format!(
                        "{}: fmt chunk too short",
                        path.display()
                    )));
                }
                let format = u16_at(&bytes, body_start);
                let channels = u16_at(&bytes, body_start + 2);
                let rate = u32_at(&bytes, body_start + 4);
                let bits = u16_at(&bytes, body_start + 14);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {}
        }
        // Chunks are word-aligned.
        off = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| {
        Error::MalformedWav(format!("{}: no fmt chunk", path.display()))
    })?;
    let data = data.ok_or_else(|| {
        Error::MalformedWav(format!("{}: no data chunk", path.display()))
    })?;
    if channels == 0 || rate == 0 {
        return Err(Error::MalformedWav(format!(
            "{}: {channels} channels at {rate} Hz",
            path.display()
        )));
    }

    let decode: fn(&[u8]) -> f64 = match (format, bits) {
        (1, 8) => |b| (b[0] as f64 - 128.0) / 128.0,
        (1, 16) => |b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0,
        (1, 24) => |b| {
            let v = i32::from_le_bytes([0, b[0], b[1], b[2]]) >> 8;
            v as f64 / 8_388_608.0
        },
        (3, 32) => |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        _ => {
            return Err(Error::UnsupportedWav(format!(
                "{}: format tag {format} at {bits} bits",
                path.display()
            )))
        }
    };

    let bytes_per_sample = (bits / 8) as usize;
    let frame_bytes = bytes_per_sample * channels as usize;
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(Error::MalformedWav(format!(
            "{}: empty data chunk",
            path.display()
        )));
    }
    let mut samples = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut acc = 0.0;
        for c in 0..channels as usize {
            let at = f * frame_bytes + c * bytes_per_sample;
            acc += decode(&data[at..at + bytes_per_sample]);
        }
        samples.push(acc / channels as f64);
    }
    AudioBuffer::new(samples, rate)
}

/// Writes a mono buffer as 16-bit PCM.
pub fn save_wav(path: impl AsRef<Path>, buffer: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let n = buffer.samples().len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&buffer.sample_rate().to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in buffer.samples() {
        // Same 1/32768 scale as the reader, clamped at positive full scale.
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("attntag_wav_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn raw_wav(format: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * channels as u32 * (bits as u32 / 8)).to_le_bytes());
        out.extend_from_slice(&(channels * bits / 8).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn sixteen_bit_full_scale() {
        let p = tmp("full_scale.wav");
        let mut data = Vec::new();
        data.extend_from_slice(&32767i16.to_le_bytes());
        data.extend_from_slice(&(-32768i16).to_le_bytes());
        std::fs::write(&p, raw_wav(1, 1, 16000, 16, &data)).unwrap();
        let buf = load_wav(&p).unwrap();
        assert!((buf.samples()[0] - 32767.0 / 32768.0).abs() < 1e-12);
        assert!((buf.samples()[0] - 0.99997).abs() < 1e-4);
        assert_eq!(buf.samples()[1], -1.0);
    }

    #[test]
    fn silence_loads_as_zeros() {
        let p = tmp("silence.wav");
        std::fs::write(&p, raw_wav(1, 1, 16000, 16, &[0u8; 64])).unwrap();
        let buf = load_wav(&p).unwrap();
        assert!(buf.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_averages_channels() {
        let p = tmp("stereo.wav");
        let mut data = Vec::new();
        // L = 0.5, R = -0.5
        data.extend_from_slice(&16384i16.to_le_bytes());
        data.extend_from_slice(&(-16384i16).to_le_bytes());
        std::fs::write(&p, raw_wav(1, 2, 16000, 16, &data)).unwrap();
        let buf = load_wav(&p).unwrap();
        assert_eq!(buf.samples(), &[0.0]);
    }

    #[test]
    fn error_variants_are_distinct() {
        assert!(matches!(load_wav(tmp("missing.wav")), Err(Error::Io { .. })));

        let p = tmp("garbage.wav");
        std::fs::write(&p, b"not a wav file").unwrap();
        assert!(matches!(load_wav(&p), Err(Error::MalformedWav(_))));

        let p = tmp("alaw.wav");
        std::fs::write(&p, raw_wav(6, 1, 16000, 8, &[0u8; 8])).unwrap();
        assert!(matches!(load_wav(&p), Err(Error::UnsupportedWav(_))));
    }

    #[test]
    fn save_load_roundtrip_within_quantization() {
        let p = tmp("roundtrip.wav");
        let samples: Vec<f64> = (0..256).map(|i| (i as f64 * 0.1).sin() * 0.8).collect();
        let buf = AudioBuffer::new(samples.clone(), 16000).unwrap();
        save_wav(&p, &buf).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.sample_rate(), 16000);
        for (a, b) in samples.iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn float_and_24bit_formats_decode() {
        let p = tmp("float32.wav");
        let mut data = Vec::new();
        data.extend_from_slice(&0.25f32.to_le_bytes());
        std::fs::write(&p, raw_wav(3, 1, 16000, 32, &data)).unwrap();
        assert_eq!(load_wav(&p).unwrap().samples(), &[0.25]);

        let p = tmp("pcm24.wav");
        // 0x400000 = 4194304 → 0.5
        std::fs::write(&p, raw_wav(1, 1, 16000, 24, &[0x00, 0x00, 0x40])).unwrap();
        assert_eq!(load_wav(&p).unwrap().samples(), &[0.5]);
    }
}
