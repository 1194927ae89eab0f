//! Stratified fold assignment and training batch generators.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::ingest::{Identified, LabeledSample};

/// Mixes a base seed with stream identifiers (splitmix64 finaliser) so that
/// generators derived from one run seed are independent and reproducible.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_FOLDS: u64 = 1;
pub(crate) const STREAM_DEFAULT_BATCHES: u64 = 2;
pub(crate) const STREAM_REBALANCED_BATCHES: u64 = 3;
pub(crate) const STREAM_SUBSAMPLE: u64 = 4;
pub(crate) const STREAM_DROPOUT: u64 = 5;
pub(crate) const STREAM_FOLD_TRAIN: u64 = 6;
pub(crate) const STREAM_FOLD_INIT: u64 = 7;
pub(crate) const STREAM_FINAL_SPLIT: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub num_folds: usize,
    /// Sample ids in corpus order.
    pub sample_ids: Vec<String>,
    /// Fold of each sample, aligned with `sample_ids`.
    pub fold: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.sample_ids.iter().position(|s| s == sample_id).map(|i| self.fold[i])
    }

    /// `(train, held_out)` corpus positions for fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.fold.len()).partition(|&i| self.fold[i] != f)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in &self.fold {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles each class with the seed and deals its members round-robin over
/// the folds. The dealing position carries over from one class to the next,
/// so overall fold sizes also differ by at most one.
pub fn stratified_fold_indices(labels: &[Family], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Argument("number of folds must be positive".into()));
    }
    let mut by_class: std::collections::BTreeMap<Family, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if let Some((f, members)) = by_class.iter().find(|(_, m)| m.len() < k) {
        log::warn!(
            "class {f} has {} sample(s) for {k} folds; some folds will lack it",
            members.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_FOLDS, k as u64));
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(fold)
}

pub fn stratified_folds<S: Identified>(samples: &[LabeledSample<S>], k: usize, seed: u64) -> Result<FoldAssignment> {
    let labels: Vec<Family> = samples.iter().map(|s| s.label).collect();
    Ok(FoldAssignment {
        num_folds: k,
        sample_ids: samples.iter().map(|s| s.sample_id().to_string()).collect(),
        fold: stratified_fold_indices(&labels, k, seed)?,
    })
}

/// Stratified subset keeping `round(fraction * n_c)` members of every class
/// (at least one per present class). Returned positions are sorted.
pub fn stratified_subsample(labels: &[Family], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: std::collections::BTreeMap<Family, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SUBSAMPLE, 0));
    let mut keep = Vec::new();
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        keep.extend_from_slice(&members[..take]);
    }
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Uniform shuffle of the training set each epoch.
    #[default]
    Default,
    /// Equal expected representation of every class in each batch.
    Rebalance,
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMode::Default => "default",
            SamplerMode::Rebalance => "rebalance",
        })
    }
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "default" | "def" => Ok(SamplerMode::Default),
            "rebalance" | "reb" => Ok(SamplerMode::Rebalance),
            _ => Err(Error::Argument(format!("unknown sampler `{s}` (expected default or rebalance)"))),
        }
    }
}

/// How a rebalanced batch picks its classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassDraw {
    /// Every slot draws its class uniformly at random.
    #[default]
    PerSlot,
    /// `batch / classes` slots per class, remainder slots to random distinct
    /// classes, then shuffled.
    Quota,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSpec {
    /// Positions into the dataset.
    pub indices: Vec<usize>,
    pub mode: SamplerMode,
}

/// Uniform shuffling; the final short batch is kept.
#[derive(Debug, Clone)]
pub struct DefaultBatches {
    train: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl DefaultBatches {
    pub fn new(train: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        Ok(DefaultBatches { train, batch_size, seed })
    }

    pub fn epoch(&self, epoch: usize) -> Vec<BatchSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_DEFAULT_BATCHES, epoch as u64));
        let mut order = self.train.clone();
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .map(|c| BatchSpec {
                indices: c.to_vec(),
                mode: SamplerMode::Default,
            })
            .collect()
    }
}

/// Class-rebalanced batches: pick a class, then a member of that class
/// uniformly with replacement. An epoch is `ceil(train_size / batch_size)`
/// batches.
#[derive(Debug, Clone)]
pub struct RebalancedBatches {
    by_class: Vec<Vec<usize>>,
    batch_size: usize,
    batches_per_epoch: usize,
    draw: ClassDraw,
    seed: u64,
}

impl RebalancedBatches {
    /// `by_class[c]` lists the training positions of class `c`; every class
    /// must be non-empty.
    pub fn new(by_class: Vec<Vec<usize>>, batch_size: usize, seed: u64, draw: ClassDraw) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if by_class.is_empty() {
            return Err(Error::Config("no classes to rebalance".into()));
        }
        if let Some(c) = by_class.iter().position(|m| m.is_empty()) {
            return Err(Error::Config(format!(
                "class {c} has no training samples; cannot rebalance"
            )));
        }
        let total: usize = by_class.iter().map(Vec::len).sum();
        Ok(RebalancedBatches {
            batches_per_epoch: total.div_ceil(batch_size),
            by_class,
            batch_size,
            draw,
            seed,
        })
    }

    pub fn from_labels(train: &[usize], labels: &[Family], num_classes: usize, batch_size: usize, seed: u64, draw: ClassDraw) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        for &i in train {
            by_class[labels[i].index()].push(i);
        }
        Self::new(by_class, batch_size, seed, draw)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    fn classes_for_batch(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let k = self.by_class.len();
        match self.draw {
            ClassDraw::PerSlot => (0..self.batch_size).map(|_| rng.random_range(0..k)).collect(),
            ClassDraw::Quota => {
                let mut classes: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, self.batch_size / k)).collect();
                let mut extra: Vec<usize> = (0..k).collect();
                extra.shuffle(rng);
                classes.extend_from_slice(&extra[..self.batch_size % k]);
                classes.shuffle(rng);
                classes
            }
        }
    }

    pub fn epoch(&self, epoch: usize) -> Vec<BatchSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_REBALANCED_BATCHES, epoch as u64));
        (0..self.batches_per_epoch)
            .map(|_| {
                let indices = self
                    .classes_for_batch(&mut rng)
                    .into_iter()
                    .map(|c| {
                        let members = &self.by_class[c];
                        members[rng.random_range(0..members.len())]
                    })
                    .collect();
                BatchSpec {
                    indices,
                    mode: SamplerMode::Rebalance,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum BatchGenerator {
    Default(DefaultBatches),
    Rebalanced(RebalancedBatches),
}

impl BatchGenerator {
    pub fn new(
        mode: SamplerMode,
        draw: ClassDraw,
        train: &[usize],
        labels: &[Family],
        num_classes: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        match mode {
            SamplerMode::Default => Ok(BatchGenerator::Default(DefaultBatches::new(train.to_vec(), batch_size, seed)?)),
            SamplerMode::Rebalance => Ok(BatchGenerator::Rebalanced(RebalancedBatches::from_labels(
                train,
                labels,
                num_classes,
                batch_size,
                seed,
                draw,
            )?)),
        }
    }

    pub fn epoch(&self, epoch: usize) -> Vec<BatchSpec> {
        match self {
            BatchGenerator::Default(g) => g.epoch(epoch),
            BatchGenerator::Rebalanced(g) => g.epoch(epoch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fam(i: usize) -> Family {
        Family::from_index(i).unwrap()
    }

    #[test]
    fn simda_sized_class_splits_nine_nine_eight_eight_eight() {
        let labels = vec![fam(4); 42];
        let folds = stratified_fold_indices(&labels, 5, 1).unwrap();
        let mut sizes = vec![0; 5];
        for f in folds {
            sizes[f] += 1;
        }
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![9, 9, 8, 8, 8]);
    }

    #[test]
    fn kelihos_sized_class_per_fold_counts() {
        let labels = vec![fam(2); 2942];
        let folds = stratified_fold_indices(&labels, 5, 3).unwrap();
        let mut sizes = [0; 5];
        for f in folds {
            sizes[f] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 588 || s == 589));
        assert_eq!(sizes.iter().sum::<usize>(), 2942);
    }

    #[test]
    fn batches_of_130() {
        let g = DefaultBatches::new((0..130).collect(), 64, 0).unwrap();
        let sizes: Vec<usize> = g.epoch(0).iter().map(|b| b.indices.len()).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
    }

    #[test]
    fn rebalance_needs_every_class() {
        let err = RebalancedBatches::new(vec![vec![0], vec![]], 4, 0, ClassDraw::PerSlot).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn quota_mode_fills_each_class() {
        let by_class: Vec<Vec<usize>> = (0..9).map(|c| vec![c * 10, c * 10 + 1]).collect();
        let g = RebalancedBatches::new(by_class, 64, 5, ClassDraw::Quota).unwrap();
        for batch in g.epoch(0) {
            let mut counts = [0usize; 9];
            for i in batch.indices {
                counts[i / 10] += 1;
            }
            assert!(counts.iter().all(|&c| c == 7 || c == 8));
            assert_eq!(counts.iter().sum::<usize>(), 64);
        }
    }

    #[test]
    fn rebalanced_epoch_length() {
        let by_class: Vec<Vec<usize>> = (0..9).map(|c| (c * 100..c * 100 + 15).collect()).collect();
        let g = RebalancedBatches::new(by_class, 64, 5, ClassDraw::PerSlot).unwrap();
        assert_eq!(g.batches_per_epoch(), 135usize.div_ceil(64));
        assert!(g.epoch(3).iter().all(|b| b.indices.len() == 64));
        assert_eq!(g.epoch(3), g.epoch(3));
        assert_ne!(g.epoch(3), g.epoch(4));
    }

    proptest! {
        #[test]
        fn folds_are_stratified(counts in prop::collection::vec(1usize..60, 1..9), k in 2usize..7, seed in any::<u64>()) {
            let labels: Vec<Family> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(fam(c), n)).collect();
            let fold = stratified_fold_indices(&labels, k, seed).unwrap();
            let mut overall = vec![0usize; k];
            for (c, _) in counts.iter().enumerate() {
                let mut per = vec![0usize; k];
                for (i, l) in labels.iter().enumerate() {
                    if l.index() == c { per[fold[i]] += 1; }
                }
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
            for &f in &fold { overall[f] += 1; }
            prop_assert!(overall.iter().max().unwrap() - overall.iter().min().unwrap() <= 1);
            prop_assert_eq!(fold.clone(), stratified_fold_indices(&labels, k, seed).unwrap());
        }

        #[test]
        fn default_epochs_are_permutations(n in 1usize..400, bs in 1usize..80, seed in any::<u64>(), epoch in 0usize..50) {
            let g = DefaultBatches::new((0..n).collect(), bs, seed).unwrap();
            let mut seen: Vec<usize> = g.epoch(epoch).into_iter().flat_map(|b| b.indices).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn subsample_keeps_class_ratios(counts in prop::collection::vec(1usize..200, 1..9), seed in any::<u64>()) {
            let labels: Vec<Family> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(fam(c), n)).collect();
            let keep = stratified_subsample(&labels, 0.2, seed).unwrap();
            for (c, &n) in counts.iter().enumerate() {
                let kept = keep.iter().filter(|&&i| labels[i].index() == c).count() as f64;
                prop_assert!((kept - 0.2 * n as f64).abs() <= 1.0);
            }
        }
    }
}
