//! Flat binary cache for mel spectrograms.
//!
//! Layout: 8-byte magic `MELCACHE`, u32 version, u64 rows, u64 cols, then
//! row-major f64 little-endian values.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{MelSpectrogram, N_MELS};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MELCACHE";
const VERSION: u32 = 1;

pub fn save_mel_cache(path: impl AsRef<Path>, spec: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(28 + spec.values().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(N_MELS as u64).to_le_bytes());
    out.extend_from_slice(&(spec.frames() as u64).to_le_bytes());
    for &v in spec.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_mel_cache(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 28 || &bytes[..8] != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a mel cache file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported mel cache version {version}",
            path.display()
        )));
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    if rows != N_MELS || bytes.len() != 28 + rows * cols * 8 {
        return Err(Error::Data(format!(
            "{}: inconsistent mel cache dimensions {rows}×{cols}",
            path.display()
        )));
    }
    let values: Vec<f64> = bytes[28..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelSpectrogram::new(values, cols)
}
