//! Shuffled global splits and few-shot training prefixes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::types::DatasetSplit;
use crate::error::{Error, Result};

/// Shuffles `0..n_sequences` with the seeded permutation and partitions by
/// sample count. Remainders go to train, then valid.
pub fn split_dataset(n_sequences: usize, seed: u64, ratio: (u32, u32, u32)) -> Result<DatasetSplit> {
    if n_sequences < 5 {
        return Err(Error::Data(format!("need at least 5 sequences to split, got {n_sequences}")));
    }
    let total = (ratio.0 + ratio.1 + ratio.2) as usize;
    if total == 0 || ratio.0 == 0 {
        return Err(Error::Config("split ratio must have a non-zero train share".into()));
    }
    let mut indices: Vec<usize> = (0..n_sequences).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let mut n_train = n_sequences * ratio.0 as usize / total;
    let mut n_valid = n_sequences * ratio.1 as usize / total;
    let n_test = n_sequences * ratio.2 as usize / total;
    let mut rem = n_sequences - n_train - n_valid - n_test;
    while rem > 0 {
        n_train += 1;
        rem -= 1;
        if rem > 0 {
            n_valid += 1;
            rem -= 1;
        }
    }

    let train = indices[..n_train].to_vec();
    let valid = indices[n_train..n_train + n_valid].to_vec();
    let test = indices[n_train + n_valid..].to_vec();
    Ok(DatasetSplit { train, valid, test, few_shot_fraction: None })
}

/// Replaces the training list by its first `ceil(fraction * len)` entries.
pub fn few_shot_subset(split: &DatasetSplit, fraction: f64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("few-shot fraction {fraction} outside (0, 1]")));
    }
    let keep = ((fraction * split.train.len() as f64).ceil() as usize).max(1);
    Ok(DatasetSplit {
        train: split.train[..keep.min(split.train.len())].to_vec(),
        valid: split.valid.clone(),
        test: split.test.clone(),
        few_shot_fraction: Some(fraction),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_ratio_splits_evenly() {
        let s = split_dataset(100, 1, (6, 2, 2)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (60, 20, 20));
    }

    #[test]
    fn remainder_goes_to_train_first() {
        let s = split_dataset(101, 1, (6, 2, 2)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (61, 20, 20));
        let s = split_dataset(104, 1, (6, 2, 2)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (63, 21, 20));
    }

    #[test]
    fn same_seed_gives_identical_split() {
        assert_eq!(split_dataset(97, 7, (6, 2, 2)).unwrap(), split_dataset(97, 7, (6, 2, 2)).unwrap());
        assert_ne!(
            split_dataset(97, 7, (6, 2, 2)).unwrap(),
            split_dataset(97, 8, (6, 2, 2)).unwrap()
        );
    }

    #[test]
    fn partitions_are_exact_and_disjoint() {
        let s = split_dataset(113, 3, (6, 2, 2)).unwrap();
        let mut all: Vec<usize> =
            s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..113).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_sequences_is_fatal() {
        assert!(matches!(split_dataset(4, 1, (6, 2, 2)), Err(Error::Data(_))));
    }

    #[test]
    fn few_shot_takes_ceiling_prefix() {
        let mut split = split_dataset(334, 1, (6, 2, 2)).unwrap();
        split.train.truncate(200);
        let f = few_shot_subset(&split, 0.05).unwrap();
        assert_eq!(f.train.len(), 10);
        assert_eq!(f.train[..], split.train[..10]);
        assert_eq!(f.valid, split.valid);
        assert_eq!(f.test, split.test);

        split.train.truncate(7);
        let f = few_shot_subset(&split, 0.01).unwrap();
        assert_eq!(f.train.len(), 1);
    }

    #[test]
    fn fraction_one_is_identity_on_train() {
        let split = split_dataset(50, 2, (6, 2, 2)).unwrap();
        let f = few_shot_subset(&split, 1.0).unwrap();
        assert_eq!(f.train, split.train);
        assert_eq!(f.few_shot_fraction, Some(1.0));
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let split = split_dataset(50, 2, (6, 2, 2)).unwrap();
        assert!(few_shot_subset(&split, 0.0).is_err());
        assert!(few_shot_subset(&split, -0.5).is_err());
        assert!(few_shot_subset(&split, 1.5).is_err());
    }
}
