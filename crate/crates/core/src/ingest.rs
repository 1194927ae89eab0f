//! Loading labeled samples from disk.
//!
//! Two on-disk sample formats are understood:
//!
//! * `.bytes` hex dumps: one `ADDRESS B1 B2 ... Bn` line per row, where
//!   `ADDRESS` is at least 8 hex digits and every byte token is two hex digits
//!   or `??` for an unreadable byte;
//! * `.bin` (or any other extension when read directly) raw binaries, taken
//!   verbatim.
//!
//! A labels table is comma-separated with an `Id,Class` header and classes
//! numbered 1..=9.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Family, NUM_CLASSES};

pub const HEX_DUMP_EXTENSION: &str = "bytes";
pub const RAW_BINARY_EXTENSION: &str = "bin";

/// Anything carrying a sample identifier.
pub trait Identified {
    fn sample_id(&self) -> &str;
}

/// Raw byte content of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteSequence {
    sample_id: String,
    bytes: Vec<u8>,
}

impl ByteSequence {
    pub fn new(sample_id: impl Into<String>, bytes: Vec<u8>) -> Result<Self> {
        let sample_id = sample_id.into();
        if bytes.is_empty() {
            return Err(Error::EmptySample(sample_id));
        }
        Ok(ByteSequence { sample_id, bytes })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn original_length(&self) -> usize {
        self.bytes.len()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

impl Identified for ByteSequence {
    fn sample_id(&self) -> &str {
        &self.sample_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample<S> {
    pub sequence: S,
    pub label: Family,
}

impl<S: Identified> Identified for LabeledSample<S> {
    fn sample_id(&self) -> &str {
        self.sequence.sample_id()
    }
}

/// What to do with `??` tokens in a hex dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownBytePolicy {
    /// Decode as 0x00, keeping byte positions intact.
    #[default]
    Zero,
    /// Skip the token entirely.
    Drop,
}

fn hex_value(c: u8) -> Option<u8> {
    match c {
        b'0'..=b'9' => Some(c - b'0'),
        b'a'..=b'f' => Some(c - b'a' + 10),
        b'A'..=b'F' => Some(c - b'A' + 10),
        _ => None,
    }
}

/// Decodes a hex dump held in memory.
pub fn parse_hex_dump(
    sample_id: &str,
    text: &[u8],
    policy: UnknownBytePolicy,
) -> Result<ByteSequence> {
    let mut bytes = Vec::with_capacity(text.len() / 3);
    for (line_no, line) in text.split(|&c| c == b'\n').enumerate() {
        let mut tokens = line
            .split(|c| c.is_ascii_whitespace())
            .filter(|t| !t.is_empty());
        let Some(address) = tokens.next() else {
            continue;
        };
        let parse_err = |message: String| Error::Parse {
            source_name: sample_id.to_string(),
            line: line_no + 1,
            message,
        };
        if address.len() < 8 || !address.iter().all(|&c| hex_value(c).is_some()) {
            return Err(parse_err(format!(
                "bad address token `{}`",
                String::from_utf8_lossy(address)
            )));
        }
        for token in tokens {
            match token {
                [b'?', b'?'] => {
                    if policy == UnknownBytePolicy::Zero {
                        bytes.push(0);
                    }
                }
                &[hi, lo] => match (hex_value(hi), hex_value(lo)) {
                    (Some(h), Some(l)) => bytes.push(h << 4 | l),
                    _ => {
                        return Err(parse_err(format!(
                            "bad byte token `{}`",
                            String::from_utf8_lossy(token)
                        )))
                    }
                },
                _ => {
                    return Err(parse_err(format!(
                        "byte token `{}` is not two characters wide",
                        String::from_utf8_lossy(token)
                    )))
                }
            }
        }
    }
    ByteSequence::new(sample_id, bytes)
}

/// Formats bytes as a hex dump with 16 bytes per line starting at `base_address`.
pub fn format_hex_dump(bytes: &[u8], base_address: u64) -> String {
    let mut out = String::with_capacity(bytes.len() * 3 + bytes.len() / 16 * 10);
    for (row, chunk) in bytes.chunks(16).enumerate() {
        let _ = write!(out, "{:08X}", base_address + 16 * row as u64);
        for b in chunk {
            let _ = write!(out, " {b:02X}");
        }
        out.push('\n');
    }
    out
}

/// Reads a file's content verbatim.
pub fn read_raw_binary(path: &Path) -> Result<ByteSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ByteSequence::new(sample_id_from_path(path), bytes)
}

/// Reads a sample, decoding it as a hex dump when it has the `.bytes` extension.
pub fn read_sample(path: &Path, policy: UnknownBytePolicy) -> Result<ByteSequence> {
    if is_hex_dump(path) {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_hex_dump(&sample_id_from_path(path), &text, policy)
    } else {
        read_raw_binary(path)
    }
}

fn is_hex_dump(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == HEX_DUMP_EXTENSION)
}

pub fn sample_id_from_path(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads an `Id,Class` labels table. Ids may be double-quoted.
pub fn read_labels(path: &Path) -> Result<Vec<(String, Family)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

pub fn parse_labels(text: &str) -> Result<Vec<(String, Family)>> {
    let unquote = |s: &str| s.trim().trim_matches('"').to_string();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let cols: Vec<String> = header.split(',').map(unquote).collect();
    if cols.len() != 2 || !cols[0].eq_ignore_ascii_case("id") || !cols[1].eq_ignore_ascii_case("class") {
        return Err(Error::Schema(format!(
            "labels header must be `Id,Class`, found `{header}`"
        )));
    }
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<String> = line.split(',').map(unquote).collect();
        if fields.len() != 2 || fields[0].is_empty() {
            return Err(Error::Schema(format!("labels line {}: `{line}`", i + 1)));
        }
        let number: i64 = fields[1].parse().map_err(|_| {
            Error::Schema(format!("labels line {}: class `{}` is not an integer", i + 1, fields[1]))
        })?;
        let family = Family::from_label_number(number)
            .map_err(|e| Error::Schema(format!("labels line {}: {e}", i + 1)))?;
        if !seen.insert(fields[0].clone()) {
            return Err(Error::Schema(format!("labels line {}: duplicate id `{}`", i + 1, fields[0])));
        }
        rows.push((fields[0].clone(), family));
    }
    Ok(rows)
}

/// Labeled sample file located on disk but not yet read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub sample_id: String,
    pub path: PathBuf,
    pub label: Family,
}

/// Lists the sample files under `data_dir` (`.bytes` or `.bin`, other files
/// ignored).
pub fn list_sample_files(data_dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut files = BTreeMap::new();
    let dir = fs::read_dir(data_dir).map_err(|e| Error::io(data_dir, e))?;
    for entry in dir {
        let path = entry.map_err(|e| Error::io(data_dir, e))?.path();
        let ext_ok = path
            .extension()
            .is_some_and(|e| e == HEX_DUMP_EXTENSION || e == RAW_BINARY_EXTENSION);
        if path.is_file() && ext_ok {
            let id = sample_id_from_path(&path);
            if let Some(prev) = files.insert(id.clone(), path.clone()) {
                return Err(Error::Schema(format!(
                    "sample id `{id}` has two files: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(files)
}

/// Joins the labels table with the sample files, sorted by sample id.
pub fn scan_corpus(data_dir: &Path, labels: &Path) -> Result<Vec<CorpusEntry>> {
    let labels = read_labels(labels)?;
    let mut files = list_sample_files(data_dir)?;
    let mut missing = Vec::new();
    let mut entries = Vec::with_capacity(labels.len());
    for (id, label) in labels {
        match files.remove(&id) {
            Some(path) => entries.push(CorpusEntry {
                sample_id: id,
                path,
                label,
            }),
            None => missing.push(id),
        }
    }
    if !missing.is_empty() || !files.is_empty() {
        missing.sort();
        return Err(Error::Reconciliation {
            missing_files: missing,
            unlabeled_files: files.into_keys().collect(),
        });
    }
    entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(entries)
}

/// Loads every labeled sample into memory, sorted by sample id.
pub fn load_corpus(
    data_dir: &Path,
    labels: &Path,
    policy: UnknownBytePolicy,
) -> Result<Vec<LabeledSample<ByteSequence>>> {
    scan_corpus(data_dir, labels)?
        .par_iter()
        .map(|e| {
            Ok(LabeledSample {
                sequence: read_sample(&e.path, policy)?,
                label: e.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub per_class_counts: BTreeMap<Family, usize>,
    /// Kilobyte bucket index (`floor(len / (bucket_kb * 1024))`) to count.
    pub size_histogram: BTreeMap<usize, usize>,
    pub bucket_kb: usize,
}

impl CorpusStats {
    pub fn from_lengths(items: impl IntoIterator<Item = (Family, usize)>, bucket_kb: usize) -> Self {
        let bucket_kb = bucket_kb.max(1);
        let mut per_class_counts = BTreeMap::new();
        let mut size_histogram = BTreeMap::new();
        for (family, len) in items {
            *per_class_counts.entry(family).or_insert(0) += 1;
            *size_histogram.entry(len / (bucket_kb * 1024)).or_insert(0) += 1;
        }
        CorpusStats {
            per_class_counts,
            size_histogram,
            bucket_kb,
        }
    }

    pub fn total(&self) -> usize {
        self.per_class_counts.values().sum()
    }

    pub fn counts_array(&self) -> [usize; NUM_CLASSES] {
        let mut out = [0; NUM_CLASSES];
        for (f, &c) in &self.per_class_counts {
            out[f.index()] = c;
        }
        out
    }
}

pub fn corpus_stats(samples: &[LabeledSample<ByteSequence>]) -> CorpusStats {
    CorpusStats::from_lengths(
        samples.iter().map(|s| (s.label, s.sequence.original_length())),
        1,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<ByteSequence> {
        parse_hex_dump("t", text.as_bytes(), UnknownBytePolicy::Zero)
    }

    #[test]
    fn decodes_a_line() {
        assert_eq!(parse("00401000 56 8D 44").unwrap().bytes(), &[0x56, 0x8D, 0x44]);
    }

    #[test]
    fn unknown_tokens_become_zero() {
        assert_eq!(parse("00401000 ?? 00").unwrap().bytes(), &[0x00, 0x00]);
        let dropped = parse_hex_dump("t", b"00401000 ?? 7f", UnknownBytePolicy::Drop).unwrap();
        assert_eq!(dropped.bytes(), &[0x7f]);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(parse(""), Err(Error::EmptySample(_))));
        assert!(matches!(parse("\n\n00401000\n"), Err(Error::EmptySample(_))));
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let err = parse("00401000 56\n00401010 5G\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse("00401000 567\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse("0040 56\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse("00401000 ?0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn handles_crlf_and_blank_lines() {
        let s = parse("00401000 01 02\r\n\r\n00401002 03\r\n").unwrap();
        assert_eq!(s.bytes(), &[1, 2, 3]);
        assert_eq!(s.original_length(), 3);
    }

    #[test]
    fn labels_table() {
        let rows = parse_labels("Id,Class\n\"a\",1\nb,9\n").unwrap();
        assert_eq!(rows[0], ("a".to_string(), Family::from_index(0).unwrap()));
        assert_eq!(rows[1].1.name(), "Gatak");
        assert!(matches!(parse_labels("Id,Class\nabc,10\n"), Err(Error::Schema(_))));
        assert!(matches!(parse_labels("Name,Class\n"), Err(Error::Schema(_))));
        assert!(parse_labels("Id,Class\n").unwrap().is_empty());
        assert!(parse_labels("").unwrap().is_empty());
    }

    #[test]
    fn stats_buckets_and_counts() {
        let f0 = Family::from_index(0).unwrap();
        let one = CorpusStats::from_lengths([(f0, 2048)], 1);
        assert_eq!(one.size_histogram, BTreeMap::from([(2, 1)]));
        let two = CorpusStats::from_lengths([(f0, 10), (f0, 5000)], 1);
        assert_eq!(two.per_class_counts, BTreeMap::from([(f0, 2)]));
        assert_eq!(two.total(), 2);
    }

    proptest! {
        #[test]
        fn hex_dump_round_trips(bytes in prop::collection::vec(any::<u8>(), 1..10_000), base in 0u64..0xFFFF_0000) {
            let text = format_hex_dump(&bytes, base);
            let parsed = parse_hex_dump("p", text.as_bytes(), UnknownBytePolicy::Zero).unwrap();
            prop_assert_eq!(parsed.bytes(), &bytes[..]);
        }

        #[test]
        fn parsing_ignores_addresses(bytes in prop::collection::vec(any::<u8>(), 1..512), a in 0u64..1 << 40, b in 0u64..1 << 40) {
            let x = parse_hex_dump("p", format_hex_dump(&bytes, a).as_bytes(), UnknownBytePolicy::Zero).unwrap();
            let y = parse_hex_dump("p", format_hex_dump(&bytes, b).as_bytes(), UnknownBytePolicy::Zero).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
