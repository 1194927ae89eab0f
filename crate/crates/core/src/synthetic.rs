//! Synthetic labeled corpora with class-specific byte motifs.
//!
//! Each file is uniform random background with one planted motif: a run of
//! constant-level blocks whose levels identify the class. The motif covers a
//! fixed fraction of the file at a random offset, so it survives resampling
//! to a fixed length regardless of file size.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Family, NUM_CLASSES};
use crate::ingest::{format_hex_dump, ByteSequence, LabeledSample};
use crate::sampling::derive_seed;

const STREAM_SYNTHETIC: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Samples per class, in class-index order.
    pub per_class: Vec<usize>,
    pub min_len: usize,
    pub max_len: usize,
    /// Motif length as a fraction of the file length.
    pub motif_fraction: f64,
    pub motif_blocks: usize,
    /// Maximum absolute jitter added to motif bytes.
    pub motif_noise: u8,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 1,800 files of 2-200 KB: 220 per class except class index 4, which
    /// gets 40.
    pub fn imbalanced(seed: u64) -> Self {
        let mut per_class = vec![220; NUM_CLASSES];
        per_class[4] = 40;
        SyntheticSpec {
            per_class,
            min_len: 2 * 1024,
            max_len: 200 * 1024,
            motif_fraction: 0.08,
            motif_blocks: 6,
            motif_noise: 4,
            seed,
        }
    }

    /// `n` samples of every class.
    pub fn balanced(n: usize, seed: u64) -> Self {
        SyntheticSpec {
            per_class: vec![n; NUM_CLASSES],
            ..Self::imbalanced(seed)
        }
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        if self.per_class.len() > NUM_CLASSES {
            return Err(Error::Config(format!("at most {NUM_CLASSES} classes")));
        }
        if self.min_len < 16 || self.min_len > self.max_len {
            return Err(Error::Config("need 16 <= min_len <= max_len".into()));
        }
        if !(self.motif_fraction > 0.0 && self.motif_fraction <= 1.0) || self.motif_blocks == 0 {
            return Err(Error::Config("motif_fraction must be in (0, 1] with at least one block".into()));
        }
        Ok(())
    }

    /// Class of the `index`-th sample (classes are laid out contiguously).
    pub fn class_of(&self, index: usize) -> Option<usize> {
        let mut end = 0;
        for (c, &n) in self.per_class.iter().enumerate() {
            end += n;
            if index < end {
                return Some(c);
            }
        }
        None
    }
}

/// Block levels of the motif for `class`.
pub fn motif_levels(class: usize, blocks: usize) -> Vec<u8> {
    (0..blocks).map(|b| (((class * 37 + b * 71) % 16) * 16 + 8) as u8).collect()
}

pub fn sample_id(index: usize) -> String {
    format!("syn{index:05}")
}

/// Generates sample `index` deterministically from the spec's seed.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Result<LabeledSample<ByteSequence>> {
    spec.validate()?;
    let class = spec
        .class_of(index)
        .ok_or_else(|| Error::Argument(format!("sample index {index} beyond {} samples", spec.total())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_SYNTHETIC, index as u64));
    let (lo, hi) = ((spec.min_len as f64).ln(), (spec.max_len as f64).ln());
    let len = (rng.random_range(lo..=hi).exp().round() as usize).clamp(spec.min_len, spec.max_len);
    let mut bytes = vec![0u8; len];
    rng.fill(&mut bytes[..]);

    let motif_len = ((len as f64 * spec.motif_fraction).round() as usize).clamp(spec.motif_blocks, len);
    let start = rng.random_range(0..=len - motif_len);
    let levels = motif_levels(class, spec.motif_blocks);
    let noise = spec.motif_noise as i16;
    for (j, b) in bytes[start..start + motif_len].iter_mut().enumerate() {
        let level = levels[j * spec.motif_blocks / motif_len] as i16;
        *b = (level + rng.random_range(-noise..=noise)).clamp(0, 255) as u8;
    }
    Ok(LabeledSample {
        sequence: ByteSequence::new(sample_id(index), bytes)?,
        label: Family::from_index(class)?,
    })
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<LabeledSample<ByteSequence>>> {
    (0..spec.total()).into_par_iter().map(|i| generate_sample(spec, i)).collect()
}

/// Writes every sample as a `.bytes` hex dump plus an `Id,Class` labels file
/// named `labels.csv` into `dir`.
pub fn write_corpus(spec: &SyntheticSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels: Vec<String> = (0..spec.total())
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(spec, i)?;
            let path = dir.join(format!("{}.bytes", sample_id(i)));
            fs::write(&path, format_hex_dump(s.sequence.bytes(), 0x0040_1000)).map_err(|e| Error::io(&path, e))?;
            Ok(format!("\"{}\",{}", sample_id(i), s.label.label_number()))
        })
        .collect::<Result<_>>()?;
    let path = dir.join("labels.csv");
    let text = format!("\"Id\",\"Class\"\n{}\n", labels.join("\n"));
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
