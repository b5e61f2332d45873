//! Seeded open-vocabulary class splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One seeded partition of class names into disjoint train/test vocabularies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: f64,
    pub split_index: usize,
    pub train_classes: Vec<String>,
    pub test_classes: Vec<String>,
}

impl SplitSpec {
    pub fn validate(&self, all_classes: &[String]) -> Result<()> {
        let mut union: Vec<&String> = self.train_classes.iter().chain(&self.test_classes).collect();
        union.sort();
        union.dedup();
        if union.len() != self.train_classes.len() + self.test_classes.len() {
            return Err(Error::validation("split classes overlap"));
        }
        let mut all: Vec<&String> = all_classes.iter().collect();
        all.sort();
        if union != all {
            return Err(Error::validation(
                "split classes do not partition the dataset's class set",
            ));
        }
        Ok(())
    }
}

/// Generate `n_splits` seeded class partitions with `round(fraction * M)`
/// train classes each (clamped so both sides stay nonempty).
pub fn make_splits(
    classes: &[String],
    fraction: f64,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<SplitSpec>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::validation(format!("train fraction {fraction} outside (0, 1)")));
    }
    if classes.len() < 2 {
        return Err(Error::validation("need at least two classes to split"));
    }
    if n_splits == 0 {
        return Err(Error::validation("n_splits must be positive"));
    }
    let mut sorted: Vec<String> = classes.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != classes.len() {
        return Err(Error::validation("duplicate class names in split input"));
    }
    let n_train =
        ((fraction * sorted.len() as f64).round() as usize).clamp(1, sorted.len() - 1);

    let mut out = Vec::with_capacity(n_splits);
    for index in 0..n_splits {
        let mut rng =
            ChaCha12Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let mut shuffled = sorted.clone();
        shuffled.shuffle(&mut rng);
        let mut train: Vec<String> = shuffled[..n_train].to_vec();
        let mut test: Vec<String> = shuffled[n_train..].to_vec();
        train.sort();
        test.sort();
        out.push(SplitSpec {
            seed,
            train_fraction: fraction,
            split_index: index,
            train_classes: train,
            test_classes: test,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class_{i:02}")).collect()
    }

    #[test]
    fn seventy_five_twenty_five_of_twenty() {
        let splits = make_splits(&classes(20), 0.75, 10, 42).unwrap();
        assert_eq!(splits.len(), 10);
        for s in &splits {
            assert_eq!(s.train_classes.len(), 15);
            assert_eq!(s.test_classes.len(), 5);
            s.validate(&classes(20)).unwrap();
        }
    }

    #[test]
    fn fifty_fifty_of_four() {
        let splits = make_splits(&classes(4), 0.5, 5, 7).unwrap();
        for s in &splits {
            assert_eq!(s.train_classes.len(), 2);
            assert_eq!(s.test_classes.len(), 2);
        }
    }

    #[test]
    fn same_seed_same_splits() {
        let a = make_splits(&classes(12), 0.75, 4, 99).unwrap();
        let b = make_splits(&classes(12), 0.75, 4, 99).unwrap();
        assert_eq!(a, b);
        let c = make_splits(&classes(12), 0.75, 4, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn partition_property() {
        for seed in 0..20u64 {
            let all = classes(9);
            for s in make_splits(&all, 0.6, 3, seed).unwrap() {
                s.validate(&all).unwrap();
                assert!(!s.train_classes.is_empty());
                assert!(!s.test_classes.is_empty());
            }
        }
    }

    #[test]
    fn bad_fraction_rejected() {
        assert!(make_splits(&classes(4), 0.0, 1, 0).is_err());
        assert!(make_splits(&classes(4), 1.0, 1, 0).is_err());
        assert!(make_splits(&classes(1), 0.5, 1, 0).is_err());
    }
}
