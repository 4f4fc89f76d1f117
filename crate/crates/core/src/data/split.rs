use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Manifest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Self { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidFractions(format!("{parts:?} has a negative or non-finite part")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFractions(format!("{parts:?} sums to {sum}")));
        }
        Ok(())
    }

    /// `(train, val, test)` counts: ⌊n·f⌋ for val and test, the rest to train.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let val = (n as f64 * self.val).floor() as usize;
        let test = (n as f64 * self.test).floor() as usize;
        (n - val - test, val, test)
    }
}

/// Seeded shuffle then a contiguous train/val/test cut. With `stratify` the
/// cut is made independently inside each class.
pub fn split_dataset(manifest: &Manifest, fractions: SplitFractions, seed: u64, stratify: bool) -> Result<Manifest> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratify {
        (0..manifest.num_classes)
            .map(|c| (0..manifest.bags.len()).filter(|&i| manifest.bags[i].label == c).collect())
            .collect()
    } else {
        vec![(0..manifest.bags.len()).collect()]
    };
    let mut out = manifest.clone();
    out.splits.clear();
    for mut group in groups {
        group.shuffle(&mut rng);
        let (train, val, _) = fractions.counts(group.len());
        for (pos, &i) in group.iter().enumerate() {
            let split = if pos < train {
                Split::Train
            } else if pos < train + val {
                Split::Val
            } else {
                Split::Test
            };
            out.splits.insert(manifest.bags[i].bag_id.clone(), split);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::data::{BagRecord, MANIFEST_VERSION, SPECIAL_TOKENS};

    fn manifest(n: usize) -> Manifest {
        Manifest {
            version: MANIFEST_VERSION,
            d_enc: 2,
            num_classes: 3,
            vocab: SPECIAL_TOKENS.map(String::from).to_vec(),
            bags: (0..n)
                .map(|i| BagRecord {
                    bag_id: format!("bag{i:04}"),
                    feature_path: String::new(),
                    num_instances: 1,
                    label: i % 3,
                    caption: vec![],
                })
                .collect(),
            splits: BTreeMap::new(),
        }
    }

    fn paper_ratios() -> SplitFractions {
        SplitFractions::new(0.2, 0.4, 0.4).unwrap()
    }

    #[test]
    fn all_train() {
        let m = split_dataset(&manifest(7), SplitFractions::new(1.0, 0.0, 0.0).unwrap(), 0, false).unwrap();
        assert_eq!(m.split_counts(), [7, 0, 0]);
    }

    #[test]
    fn ten_bags_paper_ratios() {
        let m = split_dataset(&manifest(10), paper_ratios(), 1, false).unwrap();
        assert_eq!(m.split_counts(), [2, 4, 4]);
    }

    #[test]
    fn three_hundred_bags_paper_ratios() {
        let m = split_dataset(&manifest(300), paper_ratios(), 1, false).unwrap();
        assert_eq!(m.split_counts(), [60, 120, 120]);
    }

    #[test]
    fn seeded_and_seed_sensitive() {
        let base = manifest(30);
        let a = split_dataset(&base, paper_ratios(), 5, false).unwrap();
        let b = split_dataset(&base, paper_ratios(), 5, false).unwrap();
        let c = split_dataset(&base, paper_ratios(), 6, false).unwrap();
        assert_eq!(a.splits, b.splits);
        assert_ne!(a.splits, c.splits);
    }

    #[test]
    fn stratified_balances_classes() {
        let m = split_dataset(&manifest(30), paper_ratios(), 2, true).unwrap();
        for c in 0..3 {
            let train = m
                .bags_in(Split::Train)
                .iter()
                .filter(|b| b.label == c)
                .count();
            assert_eq!(train, 2);
        }
    }

    #[test]
    fn invalid_fractions() {
        assert!(matches!(SplitFractions::new(0.5, 0.5, 0.5), Err(Error::InvalidFractions(_))));
        assert!(matches!(SplitFractions::new(1.2, -0.2, 0.0), Err(Error::InvalidFractions(_))));
    }

    proptest! {
        #[test]
        fn partition_is_exact(n in 0usize..80, seed in any::<u64>(), stratify in any::<bool>()) {
            let m = split_dataset(&manifest(n), paper_ratios(), seed, stratify).unwrap();
            prop_assert_eq!(m.splits.len(), n);
            prop_assert!(m.bags.iter().all(|b| m.splits.contains_key(&b.bag_id)));
            let [tr, va, te] = m.split_counts();
            prop_assert_eq!(tr + va + te, n);
        }
    }
}
