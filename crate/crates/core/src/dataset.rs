//! On-disk labelled datasets.
//!
//! A dataset directory holds three files:
//!
//! - `signals.f32`: every record's samples as contiguous little-endian `f32`,
//!   in manifest order
//! - `manifest.jsonl`: one JSON object per record
//!   (`index, class_id, class_index, split, seed, byte_offset, prng, params`)
//! - `dataset.json`: the [`DatasetSpec`] the directory was generated from
//!
//! Record seeds depend only on the master seed, the class id and the index
//! within the class, so any record can be regenerated on its own and the
//! output does not depend on generation order.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, PRNG_ID, TAG_NOISE, TAG_SAMPLE, TAG_SHUFFLE, TAG_SPLIT};
use crate::signal::{add_awgn, sample_params, synthesize_clean, DisturbanceClass, DisturbanceParams, Signal, TimeGrid};

pub const SIGNALS_FILE: &str = "signals.f32";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPEC_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub per_class: usize,
    pub classes: Vec<DisturbanceClass>,
    pub snr_db: f64,
    pub seed: u64,
    /// Fraction of each class assigned to the training split.
    pub train_fraction: f64,
    pub grid: TimeGrid,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            per_class: 15_000,
            classes: DisturbanceClass::ALL.to_vec(),
            snr_db: 30.0,
            seed: 0,
            train_fraction: 0.8,
            grid: TimeGrid::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.classes.is_empty() {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        let mut seen = [false; DisturbanceClass::COUNT];
        for c in &self.classes {
            if std::mem::replace(&mut seen[c.id() as usize], true) {
                return Err(Error::Config(format!("class {c} listed twice")));
            }
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config(format!(
                "train fraction {} is outside [0, 1]",
                self.train_fraction
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        Ok(())
    }

    /// Seed of record `class_index` of `class`.
    pub fn record_seed(&self, class: DisturbanceClass, class_index: usize) -> u64 {
        derive_seed(self.seed, &[TAG_SAMPLE, class.id() as u64, class_index as u64])
    }

    /// Number of training records per class.
    pub fn train_per_class(&self) -> usize {
        (self.train_fraction * self.per_class as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub class_id: u8,
    /// Position of the record among the records of its class.
    pub class_index: usize,
    pub split: Split,
    pub seed: u64,
    pub byte_offset: u64,
    pub prng: String,
    pub params: DisturbanceParams,
}

impl ManifestEntry {
    pub fn class(&self) -> Result<DisturbanceClass> {
        DisturbanceClass::from_id(self.class_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Records per class id, ordered by id.
    pub fn class_counts(&self) -> Vec<(u8, usize)> {
        let mut counts = [0usize; DisturbanceClass::COUNT];
        for e in &self.entries {
            counts[e.class_id as usize] += 1;
        }
        counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(id, &n)| (id as u8, n))
            .collect()
    }
}

/// Builds one noisy record from its seed.
pub fn generate_record(spec: &DatasetSpec, class: DisturbanceClass, class_index: usize) -> Result<Signal> {
    let seed = spec.record_seed(class, class_index);
    let params = sample_params(class, seed, &spec.grid);
    let clean = synthesize_clean(class, &params, &spec.grid)?;
    let mut noisy = add_awgn(&clean, spec.snr_db, derive_seed(seed, &[TAG_NOISE]))?;
    noisy.seed = seed;
    Ok(noisy)
}

/// Generates `spec` into `out_dir` and returns the manifest.
///
/// Each class is split on its own (stratified); the union is then shuffled.
/// Both steps draw from streams derived from the master seed only.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let n_train = spec.train_per_class();
    let mut slots: Vec<(DisturbanceClass, usize, Split)> = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for &class in &spec.classes {
        let mut order: Vec<usize> = (0..spec.per_class).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(spec.seed, &[TAG_SPLIT, class.id() as u64])));
        let mut split = vec![Split::Test; spec.per_class];
        for &i in &order[..n_train] {
            split[i] = Split::Train;
        }
        slots.extend((0..spec.per_class).map(|i| (class, i, split[i])));
    }
    // Canonical order before shuffling, so the listed class order is irrelevant.
    slots.sort_by_key(|&(c, i, _)| (c.id(), i));
    slots.shuffle(&mut rng_from_seed(derive_seed(spec.seed, &[TAG_SHUFFLE])));

    let records: Vec<Signal> = slots
        .par_iter()
        .map(|&(class, i, _)| generate_record(spec, class, i))
        .collect::<Result<_>>()?;

    let record_bytes = (spec.grid.n_samples * 4) as u64;
    let signals_path = out_dir.join(SIGNALS_FILE);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut signals = BufWriter::new(File::create(&signals_path).map_err(|e| Error::io(&signals_path, e))?);
    let mut manifest = BufWriter::new(File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);

    let mut entries = Vec::with_capacity(records.len());
    for (index, (&(class, class_index, split), record)) in slots.iter().zip(records).enumerate() {
        let bytes: Vec<u8> = record
            .samples
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        signals.write_all(&bytes).map_err(|e| Error::io(&signals_path, e))?;
        let entry = ManifestEntry {
            index,
            class_id: class.id(),
            class_index,
            split,
            seed: record.seed,
            byte_offset: index as u64 * record_bytes,
            prng: PRNG_ID.to_string(),
            params: record.params,
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
        entries.push(entry);
    }
    signals.flush().map_err(|e| Error::io(&signals_path, e))?;
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;

    let spec_path = out_dir.join(SPEC_FILE);
    let mut json = serde_json::to_string_pretty(spec)?;
    json.push('\n');
    fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))?;

    Ok(DatasetManifest {
        spec: spec.clone(),
        entries,
    })
}

/// A generated dataset opened for reading.
#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let spec_path = dir.join(SPEC_FILE);
        let spec_text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: DatasetSpec = serde_json::from_str(&spec_text)?;

        let manifest_path = dir.join(MANIFEST_FILE);
        let file = File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)?;
            entry.class()?;
            entries.push(entry);
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest: DatasetManifest { spec, entries },
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.manifest.spec.grid
    }

    /// Loads the raw signal file for random access.
    pub fn signal_store(&self) -> Result<SignalStore> {
        let path = self.dir.join(SIGNALS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(SignalStore {
            bytes,
            n_samples: self.grid().n_samples,
        })
    }

    /// Reads the samples of every entry in `entries`, in order.
    pub fn read_signals<'a>(&self, entries: impl IntoIterator<Item = &'a ManifestEntry>) -> Result<Vec<Vec<f64>>> {
        let store = self.signal_store()?;
        entries.into_iter().map(|e| store.get(e)).collect()
    }

    pub fn read_signal(&self, entry: &ManifestEntry) -> Result<Vec<f64>> {
        Ok(self.read_signals(std::iter::once(entry))?.remove(0))
    }
}

/// The contents of a signal file held in memory.
#[derive(Debug)]
pub struct SignalStore {
    bytes: Vec<u8>,
    n_samples: usize,
}

impl SignalStore {
    pub fn get(&self, entry: &ManifestEntry) -> Result<Vec<f64>> {
        let start = entry.byte_offset as usize;
        let end = start + 4 * self.n_samples;
        let raw = self.bytes.get(start..end).ok_or_else(|| {
            Error::Data(format!(
                "signal file is too short for record {} (needs bytes {start}..{end}, has {})",
                entry.index,
                self.bytes.len()
            ))
        })?;
        Ok(decode_f32_le(raw))
    }
}

pub fn decode_f32_le(raw: &[u8]) -> Vec<f64> {
    raw.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            per_class: 2,
            seed,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn counts_and_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(7), dir.path()).unwrap();
        assert_eq!(m.entries.len(), 34);
        assert_eq!(m.class_counts().len(), 17);
        assert!(m.class_counts().iter().all(|&(_, n)| n == 2));
        for (i, e) in m.entries.iter().enumerate() {
            assert_eq!(e.index, i);
            assert_eq!(e.byte_offset, i as u64 * 2600);
        }
        let len = fs::metadata(dir.path().join(SIGNALS_FILE)).unwrap().len();
        assert_eq!(len, 34 * 2600);
        // 0.8 · 2 rounds to 2 training records per class.
        assert_eq!(m.count(Split::Train), 34);
    }

    #[test]
    fn reopen_matches_generation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            per_class: 5,
            classes: vec![DisturbanceClass::Sag, DisturbanceClass::Notch],
            ..small(3)
        };
        let m = generate_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(m.count(Split::Train), 8);
        assert_eq!(m.count(Split::Test), 2);

        let e = &m.entries[3];
        let stored = ds.read_signal(e).unwrap();
        let regenerated = generate_record(&spec, e.class().unwrap(), e.class_index).unwrap();
        for (a, b) in stored.iter().zip(&regenerated.samples) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let dir = tempfile::tempdir().unwrap();
        let dup = DatasetSpec {
            classes: vec![DisturbanceClass::Sag, DisturbanceClass::Sag],
            ..small(1)
        };
        assert!(matches!(generate_dataset(&dup, dir.path()), Err(Error::Config(_))));
        let frac = DatasetSpec {
            train_fraction: 1.5,
            ..small(1)
        };
        assert!(generate_dataset(&frac, dir.path()).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = generate_dataset(&small(1), &blocker.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
