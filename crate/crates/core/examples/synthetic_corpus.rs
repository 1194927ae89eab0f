//! Writes a synthetic labeled corpus of `.bytes` dumps plus `labels.csv`.
//!
//! `cargo run --release --example synthetic_corpus -- <dir> [per-class] [seed]`
//! With no count the imbalanced 1,800-file corpus is written.

use std::path::PathBuf;

use malbyte::synthetic::{write_corpus, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().ok_or("usage: synthetic_corpus <dir> [per-class] [seed]")?);
    let per_class: Option<usize> = args.next().map(|s| s.parse()).transpose()?;
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let spec = match per_class {
        Some(n) => SyntheticSpec::balanced(n, seed),
        None => SyntheticSpec::imbalanced(seed),
    };
    write_corpus(&spec, &dir)?;
    println!("{} files written to {}", spec.total(), dir.display());
    Ok(())
}
