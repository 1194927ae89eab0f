//! Fixed-length resampling of byte sequences, greyscale export, and the
//! on-disk cache of resampled sequences.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ByteSequence, Identified};

/// Model input length.
pub const INPUT_LEN: usize = 10_000;

const CACHE_MAGIC: &[u8; 4] = b"BC1D";
const CACHE_VERSION: u32 = 1;
const CACHE_HEADER_LEN: usize = 16;
pub const CACHE_EXTENSION: &str = "bc1d";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Endpoint-aligned piecewise-linear interpolation.
    #[default]
    Linear,
    /// Box averaging over the covered input span when shrinking; linear when
    /// growing.
    Area,
}

impl Interpolation {
    fn code(self) -> u32 {
        match self {
            Interpolation::Linear => 0,
            Interpolation::Area => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Interpolation::Linear),
            1 => Ok(Interpolation::Area),
            c => Err(Error::Format(format!("unknown interpolation code {c}"))),
        }
    }
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Interpolation::Linear),
            "area" => Ok(Interpolation::Area),
            _ => Err(Error::Argument(format!("unknown interpolation `{s}`"))),
        }
    }
}

/// Fixed-length byte-intensity sequence; every value lies in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampledSequence {
    sample_id: String,
    values: Vec<f32>,
}

impl ResampledSequence {
    pub fn new(sample_id: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        let sample_id = sample_id.into();
        if values.is_empty() {
            return Err(Error::EmptySample(sample_id));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::Argument(format!(
                "sample `{sample_id}`: value {v} outside [0, 255]"
            )));
        }
        Ok(ResampledSequence { sample_id, values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Identified for ResampledSequence {
    fn sample_id(&self) -> &str {
        &self.sample_id
    }
}

/// Endpoint-aligned linear interpolation of `input` (samples at positions
/// `0..n`) onto `target_len` points.
pub fn resample_linear_values(input: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if input.is_empty() {
        return Err(Error::EmptySample(String::new()));
    }
    if target_len == 0 {
        return Err(Error::Argument("target length must be positive".into()));
    }
    let n = input.len();
    if n == target_len {
        return Ok(input.to_vec());
    }
    if n == 1 {
        return Ok(vec![input[0]; target_len]);
    }
    if target_len == 1 {
        return Ok(vec![lerp(input, (n - 1) as f64 / 2.0)]);
    }
    let scale = (n - 1) as f64 / (target_len - 1) as f64;
    Ok((0..target_len).map(|j| lerp(input, j as f64 * scale)).collect())
}

fn lerp(input: &[f64], pos: f64) -> f64 {
    let last = input.len() - 1;
    let i0 = (pos.floor() as usize).min(last);
    let frac = pos - i0 as f64;
    if i0 == last || frac <= 0.0 {
        return input[i0];
    }
    let (a, b) = (input[i0], input[i0 + 1]);
    // Clamp against rounding so outputs never leave [min(a,b), max(a,b)].
    (a + (b - a) * frac).clamp(a.min(b), a.max(b))
}

/// Box-filter shrink: output `j` averages the input over `[j*n/m, (j+1)*n/m)`
/// weighted by overlap. Growing falls back to linear interpolation.
pub fn resample_area_values(input: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if input.is_empty() {
        return Err(Error::EmptySample(String::new()));
    }
    if target_len == 0 {
        return Err(Error::Argument("target length must be positive".into()));
    }
    let n = input.len();
    if target_len >= n {
        return resample_linear_values(input, target_len);
    }
    let ratio = n as f64 / target_len as f64;
    let (lo, hi) = input
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let out = (0..target_len)
        .map(|j| {
            let start = j as f64 * ratio;
            let end = (j + 1) as f64 * ratio;
            let mut acc = 0.0;
            let mut i = start.floor() as usize;
            while (i as f64) < end && i < n {
                let overlap = (end.min(i as f64 + 1.0) - start.max(i as f64)).max(0.0);
                acc += overlap * input[i];
                i += 1;
            }
            (acc / ratio).clamp(lo, hi)
        })
        .collect();
    Ok(out)
}

pub fn resample_values(input: &[f64], target_len: usize, mode: Interpolation) -> Result<Vec<f64>> {
    match mode {
        Interpolation::Linear => resample_linear_values(input, target_len),
        Interpolation::Area => resample_area_values(input, target_len),
    }
}

/// Scales a byte sequence to `target_len` values.
pub fn resample(seq: &ByteSequence, target_len: usize, mode: Interpolation) -> Result<ResampledSequence> {
    let input: Vec<f64> = seq.bytes().iter().map(|&b| b as f64).collect();
    let values = resample_values(&input, target_len, mode)
        .map_err(|e| match e {
            Error::EmptySample(_) => Error::EmptySample(seq.sample_id().to_string()),
            other => other,
        })?
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Ok(ResampledSequence {
        sample_id: seq.sample_id().to_string(),
        values,
    })
}

pub fn resample_linear(seq: &ByteSequence, target_len: usize) -> Result<ResampledSequence> {
    resample(seq, target_len, Interpolation::Linear)
}

/// Wraps the sequence into rows of `width` pixels and encodes a binary PGM
/// (P5, maxval 255). The last row is zero-padded.
pub fn export_pgm(seq: &ResampledSequence, width: usize) -> Result<Vec<u8>> {
    if width == 0 {
        return Err(Error::Argument("image width must be at least 1".into()));
    }
    let rows = seq.len().div_ceil(width);
    let header = format!("P5\n{width} {rows}\n255\n");
    let mut out = Vec::with_capacity(header.len() + rows * width);
    out.extend_from_slice(header.as_bytes());
    out.extend(seq.values().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out.resize(header.len() + rows * width, 0);
    Ok(out)
}

/// Serializes one cache record: 16-byte header then little-endian `f32` values.
pub fn encode_cache_record(seq: &ResampledSequence, mode: Interpolation) -> Vec<u8> {
    let mut out = Vec::with_capacity(CACHE_HEADER_LEN + 4 * seq.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    out.extend_from_slice(&mode.code().to_le_bytes());
    for v in seq.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cache_record(sample_id: &str, data: &[u8]) -> Result<(ResampledSequence, Interpolation)> {
    if data.len() < CACHE_HEADER_LEN || &data[..4] != CACHE_MAGIC {
        return Err(Error::Format(format!("`{sample_id}`: not a cache record")));
    }
    let word = |i: usize| u32::from_le_bytes(data[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("`{sample_id}`: cache version {version}")));
    }
    let len = word(8) as usize;
    let mode = Interpolation::from_code(word(12))?;
    let body = &data[CACHE_HEADER_LEN..];
    if body.len() != 4 * len {
        return Err(Error::Format(format!(
            "`{sample_id}`: expected {len} values, found {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((ResampledSequence::new(sample_id, values)?, mode))
}

/// Directory of cache records, one `<sample_id>.bc1d` file per sample.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    dir: PathBuf,
    target_len: usize,
    mode: Interpolation,
}

impl SequenceCache {
    pub fn open(dir: impl Into<PathBuf>, target_len: usize, mode: Interpolation) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(SequenceCache { dir, target_len, mode })
    }

    pub fn path_for(&self, sample_id: &str) -> PathBuf {
        self.dir.join(format!("{sample_id}.{CACHE_EXTENSION}"))
    }

    /// Returns the cached record if present and produced with the same
    /// length and interpolation; `None` otherwise.
    pub fn load(&self, sample_id: &str) -> Result<Option<ResampledSequence>> {
        let path = self.path_for(sample_id);
        let data = match fs::read(&path) {
            Ok(d) => d,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let (seq, mode) = decode_cache_record(sample_id, &data)?;
        Ok((seq.len() == self.target_len && mode == self.mode).then_some(seq))
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        matches!(self.load(sample_id), Ok(Some(_)))
    }

    pub fn store(&self, seq: &ResampledSequence) -> Result<()> {
        let path = self.path_for(seq.sample_id());
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, encode_cache_record(seq, self.mode)).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Loads from cache or resamples and stores.
    pub fn get_or_insert(&self, seq: &ByteSequence) -> Result<ResampledSequence> {
        if let Some(hit) = self.load(seq.sample_id())? {
            return Ok(hit);
        }
        let fresh = resample(seq, self.target_len, self.mode)?;
        self.store(&fresh)?;
        Ok(fresh)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(bytes: Vec<u8>) -> ByteSequence {
        ByteSequence::new("s", bytes).unwrap()
    }

    #[test]
    fn two_points_onto_four() {
        let out = resample_linear_values(&[0.0, 255.0], 4).unwrap();
        assert_eq!(out, vec![0.0, 85.0, 170.0, 255.0]);
    }

    #[test]
    fn constant_input_is_preserved() {
        let out = resample_linear(&seq(vec![0x41; 5000]), INPUT_LEN).unwrap();
        assert_eq!(out.len(), INPUT_LEN);
        assert!(out.values().iter().all(|&v| v == 65.0));
    }

    #[test]
    fn identity_at_target_length() {
        let bytes: Vec<u8> = (0..INPUT_LEN).map(|i| (i * 31 % 251) as u8).collect();
        let out = resample_linear(&seq(bytes.clone()), INPUT_LEN).unwrap();
        assert!(out.values().iter().zip(&bytes).all(|(&a, &b)| a == b as f32));
    }

    #[test]
    fn single_byte_broadcasts() {
        let out = resample_linear(&seq(vec![7]), 10).unwrap();
        assert_eq!(out.values(), &[7.0; 10]);
    }

    #[test]
    fn area_mode_averages_blocks() {
        let out = resample_area_values(&[0.0, 10.0, 20.0, 30.0], 2).unwrap();
        assert_eq!(out, vec![5.0, 25.0]);
        let out = resample_area_values(&[0.0, 30.0, 60.0], 2).unwrap();
        assert!((out[0] - 10.0).abs() < 1e-12 && (out[1] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_dimensions() {
        let s = ResampledSequence::new("x", vec![0.0; INPUT_LEN]).unwrap();
        let img = export_pgm(&s, 100).unwrap();
        let header = b"P5\n100 100\n255\n";
        assert!(img.starts_with(header));
        assert_eq!(img.len(), header.len() + 10_000);
        assert!(img[header.len()..].iter().all(|&p| p == 0));

        let s = ResampledSequence::new("x", vec![200.4; INPUT_LEN]).unwrap();
        let img = export_pgm(&s, 128).unwrap();
        let header = b"P5\n128 79\n255\n";
        assert!(img.starts_with(header));
        let pixels = &img[header.len()..];
        assert_eq!(pixels.len(), 128 * 79);
        assert_eq!(pixels.iter().filter(|&&p| p == 0).count(), 112);
        assert!(pixels[..INPUT_LEN].iter().all(|&p| p == 200));

        assert!(export_pgm(&s, 0).is_err());
    }

    #[test]
    fn cache_record_layout() {
        let s = ResampledSequence::new("abc", vec![1.5, 255.0, 0.0]).unwrap();
        let rec = encode_cache_record(&s, Interpolation::Area);
        assert_eq!(&rec[..4], b"BC1D");
        assert_eq!(rec.len(), 16 + 12);
        assert_eq!(&rec[8..12], &3u32.to_le_bytes());
        let (back, mode) = decode_cache_record("abc", &rec).unwrap();
        assert_eq!(back, s);
        assert_eq!(mode, Interpolation::Area);
        assert!(decode_cache_record("abc", &rec[..20]).is_err());
        let mut bad = rec.clone();
        bad[0] = b'X';
        assert!(decode_cache_record("abc", &bad).is_err());
    }

    #[test]
    fn cache_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = SequenceCache::open(dir.path(), 16, Interpolation::Linear).unwrap();
        let s = seq(vec![1, 2, 3, 4, 5]);
        assert!(!cache.contains("s"));
        let a = cache.get_or_insert(&s).unwrap();
        assert!(cache.contains("s"));
        assert_eq!(cache.load("s").unwrap().unwrap(), a);
        // A cache opened with another length treats the record as stale.
        let other = SequenceCache::open(dir.path(), 32, Interpolation::Linear).unwrap();
        assert!(other.load("s").unwrap().is_none());
    }

    fn byte_vec(max: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0u8..=255, 1..max).prop_map(|v| v.into_iter().map(f64::from).collect())
    }

    proptest! {
        #[test]
        fn outputs_stay_within_input_range(x in byte_vec(3000), m in 1usize..5000) {
            let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for mode in [Interpolation::Linear, Interpolation::Area] {
                for v in resample_values(&x, m, mode).unwrap() {
                    prop_assert!(lo <= v && v <= hi);
                }
            }
        }

        #[test]
        fn monotone_in_monotone_out(mut x in byte_vec(2000), m in 2usize..4000) {
            x.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let y = resample_linear_values(&x, m).unwrap();
            prop_assert!(y.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn downsampling_an_upsample_recovers_the_input(x in byte_vec(300), k in 1usize..8) {
            // Grid of length k*(n-1)+1 contains every original point.
            let n = x.len();
            let up = resample_linear_values(&x, k * (n - 1) + 1).unwrap();
            let down = resample_linear_values(&up, n).unwrap();
            for (a, b) in down.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
