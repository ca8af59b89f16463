//! Dataset ingestion, splits, and batch assembly.
//!
//! The ingestion contract is a normalized layout: a UTF-8 annotation CSV
//! (header `clip_id,path,<tag>...`, 0/1 cells) next to PCM WAV files.

pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dsp::{self, AudioBuffer, MelSpectrogram};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One audio example with its binary tag vector.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub path: PathBuf,
    pub tags: Vec<f64>,
}

/// Split assignment for a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Parsed annotation table.
#[derive(Debug, Clone)]
pub struct ClipTable {
    pub clips: Vec<Clip>,
    pub tag_names: Vec<String>,
    /// Clip ids whose audio file was absent (excluded from `clips`).
    pub missing_audio: Vec<String>,
    /// Rows dropped because no tag was set.
    pub dropped_empty: usize,
}

impl ClipTable {
    pub fn n_tags(&self) -> usize {
        self.tag_names.len()
    }

    /// Per-tag positive counts.
    pub fn tag_frequencies(&self) -> Vec<usize> {
        let mut freq = vec![0usize; self.tag_names.len()];
        for clip in &self.clips {
            for (f, &t) in freq.iter_mut().zip(&clip.tags) {
                if t != 0.0 {
                    *f += 1;
                }
            }
        }
        freq
    }
}

/// Parses an annotation CSV, dropping all-zero rows and clips whose audio is
/// missing on disk.
pub fn load_annotations(csv_path: impl AsRef<Path>, audio_root: impl AsRef<Path>) -> Result<ClipTable> {
    let csv_path = csv_path.as_ref();
    let audio_root = audio_root.as_ref();
    let text =
        fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty annotation file", csv_path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "clip_id" || cols[1] != "path" {
        return Err(Error::Data(format!(
            "{}: header must start with `clip_id,path` followed by tag columns",
            csv_path.display()
        )));
    }
    let tag_names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();

    let mut clips = Vec::new();
    let mut seen = HashSet::new();
    let mut missing_audio = Vec::new();
    let mut dropped_empty = 0;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 + tag_names.len() {
            return Err(Error::Data(format!(
                "{}:{}: expected {} fields, found {}",
                csv_path.display(),
                lineno + 1,
                2 + tag_names.len(),
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!(
                "{}:{}: duplicate clip_id `{id}`",
                csv_path.display(),
                lineno + 1
            )));
        }
        let mut tags = Vec::with_capacity(tag_names.len());
        for (ci, cell) in fields[2..].iter().enumerate() {
            match *cell {
                "0" => tags.push(0.0),
                "1" => tags.push(1.0),
                other => {
                    return Err(Error::Data(format!(
                        "{}:{}: tag column `{}` has `{other}`, expected 0 or 1",
                        csv_path.display(),
                        lineno + 1,
                        tag_names[ci]
                    )))
                }
            }
        }
        if tags.iter().all(|&t| t == 0.0) {
            dropped_empty += 1;
            continue;
        }
        let path = audio_root.join(fields[1]);
        if !path.exists() {
            missing_audio.push(id);
            continue;
        }
        clips.push(Clip { id, path, tags });
    }
    Ok(ClipTable {
        clips,
        tag_names,
        missing_audio,
        dropped_empty,
    })
}

/// How clips are partitioned into train/valid/test.
pub enum SplitRule {
    /// Explicit id lists; every listed id must exist and appear once.
    Explicit {
        train: Vec<String>,
        valid: Vec<String>,
        test: Vec<String>,
    },
    /// Deterministic digest rule: sha-256(id) mod 10 → 0–7 train, 8 valid, 9 test.
    Hash,
}

/// Digest bucket in 0..10 used by the hash split rule.
pub fn split_bucket(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap()) % 10
}

pub fn split_for_id(id: &str) -> Split {
    match split_bucket(id) {
        0..=7 => Split::Train,
        8 => Split::Valid,
        _ => Split::Test,
    }
}

/// Assigns a split to every clip; returns assignments aligned with `clips`.
pub fn assign_splits(table: &ClipTable, rule: &SplitRule) -> Result<Vec<Split>> {
    match rule {
        SplitRule::Hash => Ok(table.clips.iter().map(|c| split_for_id(&c.id)).collect()),
        SplitRule::Explicit { train, valid, test } => {
            let mut lookup = std::collections::HashMap::new();
            for (ids, split) in [
                (train, Split::Train),
                (valid, Split::Valid),
                (test, Split::Test),
            ] {
                for id in ids {
                    if lookup.insert(id.as_str(), split).is_some() {
                        return Err(Error::Data(format!(
                            "clip id `{id}` appears in more than one split list"
                        )));
                    }
                }
            }
            table
                .clips
                .iter()
                .map(|c| {
                    lookup.get(c.id.as_str()).copied().ok_or_else(|| {
                        Error::Data(format!("clip id `{}` is missing from the split lists", c.id))
                    })
                })
                .collect()
        }
    }
}

/// Reads a split list file: one clip id per line.
pub fn read_split_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Input representation a prepared clip carries.
#[derive(Debug, Clone)]
pub enum PreparedInput {
    Spec(MelSpectrogram),
    Raw(AudioBuffer),
}

impl PreparedInput {
    /// Chunkable extent: frames for spectrograms, samples for raw audio.
    pub fn extent(&self) -> usize {
        match self {
            PreparedInput::Spec(m) => m.frames(),
            PreparedInput::Raw(b) => b.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub id: String,
    pub tags: Vec<f64>,
    pub split: Split,
    pub input: PreparedInput,
}

/// Which representation to prepare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Spec,
    Raw,
}

/// In-memory dataset: preprocessed inputs plus split assignments.
pub struct PreparedDataset {
    pub clips: Vec<PreparedClip>,
    pub tag_names: Vec<String>,
}

impl PreparedDataset {
    /// Loads, resamples to 16 kHz, and preprocesses every clip of a table.
    pub fn prepare(table: &ClipTable, splits: &[Split], repr: Representation) -> Result<Self> {
        if splits.len() != table.clips.len() {
            return Err(Error::config("split assignments do not cover the clip table"));
        }
        let mut clips = Vec::with_capacity(table.clips.len());
        for (clip, &split) in table.clips.iter().zip(splits) {
            let audio = dsp::load_wav(&clip.path)?;
            let audio = dsp::resample(&audio, dsp::SAMPLE_RATE)?;
            let input = match repr {
                Representation::Spec => PreparedInput::Spec(dsp::log_mel(&audio)?),
                Representation::Raw => PreparedInput::Raw(audio),
            };
            clips.push(PreparedClip {
                id: clip.id.clone(),
                tags: clip.tags.clone(),
                split,
                input,
            });
        }
        Ok(PreparedDataset {
            clips,
            tag_names: table.tag_names.clone(),
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_tags(&self) -> usize {
        self.tag_names.len()
    }
}

/// One training batch.
pub struct Batch {
    pub input: Tensor,
    pub labels: Tensor,
    pub clip_indices: Vec<usize>,
}

fn spec_chunk_tensor(chunks: &[(&MelSpectrogram, usize)], chunk_len: usize) -> Tensor {
    let b = chunks.len();
    let mut data = Vec::with_capacity(b * dsp::N_MELS * chunk_len);
    for &(mel, offset) in chunks {
        for m in 0..dsp::N_MELS {
            let row = &mel.values()[m * mel.frames()..(m + 1) * mel.frames()];
            data.extend_from_slice(&row[offset..offset + chunk_len]);
        }
    }
    Tensor::new(vec![b, 1, dsp::N_MELS, chunk_len], data).expect("chunk tensor shape")
}

fn raw_chunk_tensor(chunks: &[(&AudioBuffer, usize)], chunk_len: usize) -> Tensor {
    let b = chunks.len();
    let mut data = Vec::with_capacity(b * chunk_len);
    for &(buf, offset) in chunks {
        data.extend_from_slice(&buf.samples()[offset..offset + chunk_len]);
    }
    Tensor::new(vec![b, 1, chunk_len], data).expect("chunk tensor shape")
}

fn labels_tensor(ds: &PreparedDataset, indices: &[usize]) -> Tensor {
    let n_tags = ds.n_tags();
    let mut data = Vec::with_capacity(indices.len() * n_tags);
    for &i in indices {
        data.extend_from_slice(&ds.clips[i].tags);
    }
    Tensor::new(vec![indices.len(), n_tags], data).expect("label tensor shape")
}

fn gather_input_tensor(ds: &PreparedDataset, items: &[(usize, usize)], chunk_len: usize) -> Tensor {
    match ds.clips[items[0].0].input {
        PreparedInput::Spec(_) => {
            let chunks: Vec<(&MelSpectrogram, usize)> = items
                .iter()
                .map(|&(i, off)| match &ds.clips[i].input {
                    PreparedInput::Spec(m) => (m, off),
                    PreparedInput::Raw(_) => unreachable!("mixed representations"),
                })
                .collect();
            spec_chunk_tensor(&chunks, chunk_len)
        }
        PreparedInput::Raw(_) => {
            let chunks: Vec<(&AudioBuffer, usize)> = items
                .iter()
                .map(|&(i, off)| match &ds.clips[i].input {
                    PreparedInput::Raw(b) => (b, off),
                    PreparedInput::Spec(_) => unreachable!("mixed representations"),
                })
                .collect();
            raw_chunk_tensor(&chunks, chunk_len)
        }
    }
}

/// Shuffled training batches: one uniformly random chunk per eligible clip.
/// Returns the batches plus the number of too-short clips skipped.
pub fn train_batches(
    ds: &PreparedDataset,
    split: Split,
    chunk_len: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Batch>, usize)> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut eligible: Vec<usize> = Vec::new();
    let mut skipped = 0;
    for i in ds.indices(split) {
        if ds.clips[i].input.extent() >= chunk_len {
            eligible.push(i);
        } else {
            skipped += 1;
        }
    }
    if eligible.is_empty() {
        return Err(Error::config(format!(
            "no clip in the {split:?} split is at least one chunk ({chunk_len}) long"
        )));
    }
    eligible.shuffle(rng);
    let mut batches = Vec::new();
    for group in eligible.chunks(batch_size) {
        let items: Vec<(usize, usize)> = group
            .iter()
            .map(|&i| {
                let extent = ds.clips[i].input.extent();
                let offset = rng.gen_range(0..=extent - chunk_len);
                (i, offset)
            })
            .collect();
        batches.push(Batch {
            input: gather_input_tensor(ds, &items, chunk_len),
            labels: labels_tensor(ds, group),
            clip_indices: group.to_vec(),
        });
    }
    Ok((batches, skipped))
}

/// Deterministic evaluation batches covering every non-overlapping chunk of
/// every eligible clip; rows keep their clip index for score averaging.
pub fn eval_batches(
    ds: &PreparedDataset,
    split: Split,
    chunk_len: usize,
    batch_size: usize,
) -> Result<(Vec<Batch>, usize)> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut items: Vec<(usize, usize)> = Vec::new();
    let mut skipped = 0;
    for i in ds.indices(split) {
        let extent = ds.clips[i].input.extent();
        let n_chunks = dsp::eval_chunk_count(extent, chunk_len);
        if n_chunks == 0 {
            skipped += 1;
            continue;
        }
        for c in 0..n_chunks {
            items.push((i, c * chunk_len));
        }
    }
    if items.is_empty() {
        return Err(Error::config(format!(
            "no clip in the {split:?} split is at least one chunk ({chunk_len}) long"
        )));
    }
    let mut batches = Vec::new();
    for group in items.chunks(batch_size) {
        let indices: Vec<usize> = group.iter().map(|&(i, _)| i).collect();
        batches.push(Batch {
            input: gather_input_tensor(ds, group, chunk_len),
            labels: labels_tensor(ds, &indices),
            clip_indices: indices,
        });
    }
    Ok((batches, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn write_tmp(name: &str, contents: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("attntag_data_tests");
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        fs::write(&p, contents).unwrap();
        p
    }

    fn touch_wavs(dir: &Path, ids: &[&str]) {
        fs::create_dir_all(dir).unwrap();
        let buf = AudioBuffer::new(vec![0.1; 600], 16000).unwrap();
        for id in ids {
            dsp::save_wav(dir.join(format!("{id}.wav")), &buf).unwrap();
        }
    }

    #[test]
    fn annotations_drop_empty_rows_and_count_tags() {
        let root = std::env::temp_dir().join("attntag_data_tests/ann1");
        touch_wavs(&root, &["a", "b", "c", "d"]);
        let csv = write_tmp(
            "ann1.csv",
            "clip_id,path,rock,jazz\n\
             a,ann1/../ann1/a.wav,1,0\n\
             b,b.wav,0,0\n\
             c,c.wav,1,1\n\
             d,d.wav,0,1\n",
        );
        let table = load_annotations(&csv, &root).unwrap();
        assert_eq!(table.clips.len(), 3);
        assert_eq!(table.dropped_empty, 1);
        assert_eq!(table.tag_names, vec!["rock", "jazz"]);
        assert_eq!(table.tag_frequencies(), vec![2, 2]);
    }

    #[test]
    fn annotations_report_line_numbers_and_duplicates() {
        let root = std::env::temp_dir().join("attntag_data_tests/ann2");
        touch_wavs(&root, &["a"]);
        let csv = write_tmp("ann2.csv", "clip_id,path,rock\na,a.wav,1\na,a.wav,1,0\n");
        let err = load_annotations(&csv, &root).unwrap_err().to_string();
        assert!(err.contains(":3"), "{err}");

        let csv = write_tmp("ann3.csv", "clip_id,path,rock\na,a.wav,1\na,a.wav,1\n");
        let err = load_annotations(&csv, &root).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn annotations_report_missing_audio() {
        let root = std::env::temp_dir().join("attntag_data_tests/ann4");
        touch_wavs(&root, &["here"]);
        let csv = write_tmp(
            "ann4.csv",
            "clip_id,path,rock\nhere,here.wav,1\ngone,gone.wav,1\n",
        );
        let table = load_annotations(&csv, &root).unwrap();
        assert_eq!(table.clips.len(), 1);
        assert_eq!(table.missing_audio, vec!["gone".to_string()]);
    }

    #[test]
    fn hand_counted_fixture_matches_tag_frequencies() {
        let root = std::env::temp_dir().join("attntag_data_tests/ann5");
        let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        touch_wavs(&root, &ids.iter().map(String::as_str).collect::<Vec<_>>());
        let mut csv = String::from("clip_id,path,t0,t1,t2\n");
        // t0 on even clips (5), t1 on multiples of 3 (4), t2 on clip 7 only.
        for i in 0..10 {
            csv.push_str(&format!(
                "c{i},c{i}.wav,{},{},{}\n",
                (i % 2 == 0) as u8,
                (i % 3 == 0) as u8,
                (i == 7) as u8
            ));
        }
        let table = load_annotations(&write_tmp("ann5.csv", &csv), &root).unwrap();
        assert_eq!(table.tag_frequencies(), vec![5, 4, 1]);
    }

    #[test]
    fn explicit_splits_are_honored_and_overlap_rejected() {
        let root = std::env::temp_dir().join("attntag_data_tests/spl");
        touch_wavs(&root, &["a", "b", "c"]);
        let csv = write_tmp(
            "spl.csv",
            "clip_id,path,rock\na,a.wav,1\nb,b.wav,1\nc,c.wav,1\n",
        );
        let table = load_annotations(&csv, &root).unwrap();
        let rule = SplitRule::Explicit {
            train: vec!["a".into()],
            valid: vec!["b".into()],
            test: vec!["c".into()],
        };
        let splits = assign_splits(&table, &rule).unwrap();
        assert_eq!(splits, vec![Split::Train, Split::Valid, Split::Test]);

        let bad = SplitRule::Explicit {
            train: vec!["a".into(), "b".into()],
            valid: vec!["b".into()],
            test: vec!["c".into()],
        };
        assert!(assign_splits(&table, &bad).is_err());
    }

    #[test]
    fn hash_rule_is_stable_and_roughly_80_10_10() {
        let ids: Vec<String> = (0..1000).map(|i| format!("synth_clip_{i:05}")).collect();
        let first: Vec<Split> = ids.iter().map(|s| split_for_id(s)).collect();
        let second: Vec<Split> = ids.iter().map(|s| split_for_id(s)).collect();
        assert_eq!(first, second);
        let train = first.iter().filter(|&&s| s == Split::Train).count();
        let valid = first.iter().filter(|&&s| s == Split::Valid).count();
        let test = first.iter().filter(|&&s| s == Split::Test).count();
        assert!((770..=830).contains(&train), "train {train}");
        assert!((70..=130).contains(&valid), "valid {valid}");
        assert!((70..=130).contains(&test), "test {test}");
    }

    fn tiny_prepared(extents: &[usize]) -> PreparedDataset {
        let clips = extents
            .iter()
            .enumerate()
            .map(|(i, &n)| PreparedClip {
                id: format!("c{i}"),
                tags: vec![1.0, 0.0],
                split: Split::Train,
                input: PreparedInput::Raw(
                    AudioBuffer::new(vec![0.01 * i as f64 + 0.01; n], 16000).unwrap(),
                ),
            })
            .collect();
        PreparedDataset {
            clips,
            tag_names: vec!["x".into(), "y".into()],
        }
    }

    #[test]
    fn training_epoch_covers_every_eligible_clip_once() {
        let ds = tiny_prepared(&[100, 100, 100, 100, 100, 30]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (batches, skipped) = train_batches(&ds, Split::Train, 50, 2, &mut rng).unwrap();
        assert_eq!(skipped, 1);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.clip_indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fixed_seed_reproduces_batch_order_and_offsets() {
        let ds = tiny_prepared(&[500, 500, 500, 500]);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let (batches, _) = train_batches(&ds, Split::Train, 100, 2, &mut rng).unwrap();
            batches
                .iter()
                .map(|b| (b.clip_indices.clone(), b.input.data().to_vec()))
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for ((ia, da), (ib, db)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            assert_eq!(da, db);
        }
    }

    #[test]
    fn eval_chunks_are_non_overlapping_floor_division() {
        // A 1024-frame clip yields exactly 4 non-overlapping 256-frame chunks.
        let values = vec![0.0; dsp::N_MELS * 1024];
        let ds = PreparedDataset {
            clips: vec![PreparedClip {
                id: "x".into(),
                tags: vec![1.0],
                split: Split::Valid,
                input: PreparedInput::Spec(MelSpectrogram::new(values, 1024).unwrap()),
            }],
            tag_names: vec!["t".into()],
        };
        let (batches, _) = eval_batches(&ds, Split::Valid, 256, 8).unwrap();
        let rows: usize = batches.iter().map(|b| b.clip_indices.len()).sum();
        assert_eq!(rows, 4);
    }
}
