//! Seeded synthetic corpus: WAV files plus an annotation CSV.
//!
//! Clips are mixtures of recipe components — pure tones, band-limited noise,
//! amplitude-modulated tones, sustained harmonic stacks ("flute"-like) and
//! decaying harmonic notes ("piano"-like) — rendered at a quiet/normal/loud
//! RMS. The seed fully determines every byte on disk.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{save_wav, AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Tag vocabulary of the generator, in CSV column order.
pub const SYNTH_TAGS: [&str; 7] = ["tone", "noise", "beats", "quiet", "loud", "flute", "piano"];

const TIMBRES: [Timbre; 5] = [
    Timbre::Tone,
    Timbre::Noise,
    Timbre::Beats,
    Timbre::Flute,
    Timbre::Piano,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Timbre {
    Tone,
    Noise,
    Beats,
    Flute,
    Piano,
}

impl Timbre {
    fn tag_index(self) -> usize {
        match self {
            Timbre::Tone => 0,
            Timbre::Noise => 1,
            Timbre::Beats => 2,
            Timbre::Flute => 5,
            Timbre::Piano => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loudness {
    Normal,
    Quiet,
    Loud,
}

impl Loudness {
    fn target_rms(self) -> f64 {
        match self {
            Loudness::Quiet => 0.02,
            Loudness::Normal => 0.12,
            Loudness::Loud => 0.34,
        }
    }
}

/// Generator parameters; the seed determines the corpus byte-for-byte.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_clips: usize,
    pub duration_seconds: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            n_clips: 16,
            duration_seconds: 4.2,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Newman phases keep multi-sine crest factors small and deterministic.
fn newman_phase(k: usize, count: usize) -> f64 {
    PI * (k * k) as f64 / count as f64
}

fn render_tone(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f = 200.0 * 10f64.powf(rng.gen_range(0.0..1.0)); // 200–2000 Hz
    (0..n)
        .map(|i| (2.0 * PI * f * i as f64 / SAMPLE_RATE as f64).sin())
        .collect()
}

fn render_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Band-limited 2–6 kHz: 48 sinusoids with crest-controlled phases and a
    // per-clip frequency jitter.
    let comps = 48;
    let jitter: f64 = rng.gen_range(0.0..80.0);
    let freqs: Vec<f64> = (0..comps)
        .map(|k| 2000.0 + jitter + 4000.0 * k as f64 / comps as f64)
        .collect();
    let amp = 1.0 / (comps as f64).sqrt();
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            freqs
                .iter()
                .enumerate()
                .map(|(k, &f)| amp * (2.0 * PI * f * t + newman_phase(k, comps)).sin())
                .sum()
        })
        .collect()
}

fn render_beats(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f = 300.0 * 10f64.powf(rng.gen_range(0.0..0.6));
    let f_am = rng.gen_range(2.0..8.0);
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = 0.2 + 0.8 * (0.5 + 0.5 * (2.0 * PI * f_am * t).sin());
            env * (2.0 * PI * f * t).sin()
        })
        .collect()
}

fn render_flute(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Sustained harmonic stack with a slow attack and gentle vibrato.
    let f0 = 300.0 * 10f64.powf(rng.gen_range(0.0..0.5));
    let vib = rng.gen_range(4.0..6.0);
    let amps = [1.0, 0.35, 0.2, 0.1, 0.05];
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let attack = (t / 0.4).min(1.0);
            let f = f0 * (1.0 + 0.003 * (2.0 * PI * vib * t).sin());
            attack
                * amps
                    .iter()
                    .enumerate()
                    .map(|(k, &a)| a * (2.0 * PI * f * (k + 1) as f64 * t + newman_phase(k, 5)).sin())
                    .sum::<f64>()
        })
        .collect()
}

fn render_piano(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Repeated notes with a fast exponential decay.
    let f0 = 220.0 * 10f64.powf(rng.gen_range(0.0..0.5));
    let note_period = 0.45;
    let decay = 0.35;
    let amps = [1.0, 0.4, 0.2];
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let since_onset = t % note_period;
            let env = 0.3 + 0.7 * (-since_onset / decay).exp();
            env * amps
                .iter()
                .enumerate()
                .map(|(k, &a)| a * (2.0 * PI * f0 * (k + 1) as f64 * t + newman_phase(k, 3)).sin())
                .sum::<f64>()
        })
        .collect()
}

fn render_timbre(timbre: Timbre, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match timbre {
        Timbre::Tone => render_tone(n, rng),
        Timbre::Noise => render_noise(n, rng),
        Timbre::Beats => render_beats(n, rng),
        Timbre::Flute => render_flute(n, rng),
        Timbre::Piano => render_piano(n, rng),
    }
}

fn rms(samples: &[f64]) -> f64 {
    (samples.iter().map(|&s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Deterministic recipe schedule for clip `i`: a base timbre cycling through
/// all five kinds, a quiet/normal/loud treatment, and a second mixed-in
/// timbre on every eighth clip.
fn schedule(i: usize) -> (Timbre, Option<Timbre>, Loudness) {
    let timbre = TIMBRES[i % 5];
    let loudness = match i % 3 {
        0 => Loudness::Normal,
        1 => Loudness::Quiet,
        _ => Loudness::Loud,
    };
    let second = if i % 8 == 7 {
        let mut other = TIMBRES[(i / 8 + i + 2) % 5];
        if other == timbre {
            other = TIMBRES[(i / 8 + i + 3) % 5];
        }
        Some(other)
    } else {
        None
    };
    (timbre, second, loudness)
}

/// Renders one clip: mixed components normalized to the loudness target.
pub fn render_clip(spec: &SynthSpec, index: usize) -> (AudioBuffer, Vec<f64>) {
    let n = (spec.duration_seconds * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ splitmix64(index as u64 + 1)));
    let (timbre, second, loudness) = schedule(index);

    let mut samples = render_timbre(timbre, n, &mut rng);
    let mut tags = vec![0.0; SYNTH_TAGS.len()];
    tags[timbre.tag_index()] = 1.0;
    if let Some(other) = second {
        let extra = render_timbre(other, n, &mut rng);
        for (s, e) in samples.iter_mut().zip(&extra) {
            *s = 0.5 * (*s + e);
        }
        tags[other.tag_index()] = 1.0;
    }
    match loudness {
        Loudness::Quiet => tags[3] = 1.0,
        Loudness::Loud => tags[4] = 1.0,
        Loudness::Normal => {}
    }

    let current = rms(&samples);
    let mut scale = loudness.target_rms() / current;
    let peak = samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    if peak * scale > 0.999 {
        scale = 0.999 / peak;
    }
    for s in samples.iter_mut() {
        *s *= scale;
    }
    (
        AudioBuffer::new(samples, SAMPLE_RATE).expect("synthetic clip is non-empty"),
        tags,
    )
}

/// Corpus summary returned by [`synth_corpus`].
pub struct SynthSummary {
    pub n_clips: usize,
    pub csv_path: std::path::PathBuf,
    pub tag_counts: Vec<usize>,
}

/// Writes `n_clips` WAV files plus `annotations.csv` under `out_dir`.
pub fn synth_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<SynthSummary> {
    let out_dir = out_dir.as_ref();
    if spec.n_clips == 0 {
        return Err(Error::config("n_clips must be positive"));
    }
    if spec.duration_seconds * SAMPLE_RATE as f64 < 1.0 {
        return Err(Error::config("duration_seconds is too short"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut csv = String::from("clip_id,path");
    for tag in SYNTH_TAGS {
        csv.push(',');
        csv.push_str(tag);
    }
    csv.push('\n');

    let mut tag_counts = vec![0usize; SYNTH_TAGS.len()];
    for i in 0..spec.n_clips {
        let (audio, tags) = render_clip(spec, i);
        let name = format!("clip_{i:04}.wav");
        save_wav(out_dir.join(&name), &audio)?;
        csv.push_str(&format!("clip_{i:04},{name}"));
        for (c, &t) in tag_counts.iter_mut().zip(&tags) {
            if t != 0.0 {
                *c += 1;
            }
        }
        for &t in &tags {
            csv.push_str(if t != 0.0 { ",1" } else { ",0" });
        }
        csv.push('\n');
    }
    let csv_path = out_dir.join("annotations.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok(SynthSummary {
        n_clips: spec.n_clips,
        csv_path,
        tag_counts,
    })
}
